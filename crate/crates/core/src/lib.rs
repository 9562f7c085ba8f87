//! From-scratch vision-transformer object detector.
//!
//! An image is cut into overlapping patches, embedded and run through a
//! pre-LN transformer encoder; the output tokens are reassembled into a
//! square feature map, refined by residual convolution blocks, and consumed
//! by a region proposal network plus an ROI classification head. Training,
//! COCO-style evaluation and a synthetic-shapes dataset generator are
//! included, all built on the crate's own reverse-mode autodiff engine.

pub mod backbone;
pub mod cli;
pub mod data;
pub mod detector;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod train;
pub mod tensor;

pub use tensor::{Scalar, Tape, Tensor, TensorId};
