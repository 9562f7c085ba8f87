//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a flat buffer plus a shape. [`tape::Tape`] records primitive
//! operations as they execute and replays them in reverse to accumulate
//! gradients. The engine is generic over the scalar type: training runs in
//! `f32`, gradient checks run in `f64` where finite-difference tolerances are
//! meaningful.
//!
//! Layout is row-major everywhere and slices copy; there are no strided
//! views. Broadcasting is not implicit: the only shape-mixing operations
//! are the explicit scalar-with-tensor and bias-per-row ops.

pub mod tape;

use std::fmt::{Debug, Display};
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

pub use tape::{Tape, TensorId};

/// Scalar element of a tensor. Implemented for `f32` and `f64`.
pub trait Scalar:
    Copy
    + PartialOrd
    + Debug
    + Display
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn maxs(self, other: Self) -> Self;
    fn mins(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn tanh(self) -> Self {
                self.tanh()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn maxs(self, other: Self) -> Self {
                self.max(other)
            }
            fn mins(self, other: Self) -> Self {
                self.min(other)
            }
            fn is_finite(self) -> bool {
                self.is_finite()
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

/// Dense n-dimensional array, row-major.
///
/// `requires_grad` and `grad` are only meaningful for tensors registered on a
/// [`Tape`] or held in a parameter store; standalone tensors leave them at
/// their defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
    pub requires_grad: bool,
    pub grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Self {
        let numel: usize = shape.iter().product();
        assert!(
            shape.iter().all(|&d| d > 0),
            "tensor shape {:?} has a zero extent",
            shape
        );
        assert_eq!(
            data.len(),
            numel,
            "data length {} does not match shape {:?} (numel {})",
            data.len(),
            shape,
            numel
        );
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![S::ZERO; numel])
    }

    pub fn filled(shape: Vec<usize>, value: S) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![value; numel])
    }

    pub fn scalar(value: S) -> Self {
        Tensor::from_vec(vec![1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Reinterpret with a new shape of equal element count. Data untouched.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            self.data.len(),
            "reshape {:?} -> {:?} changes element count",
            self.shape,
            shape
        );
        self.shape = shape;
        self
    }

    pub fn item(&self) -> S {
        assert_eq!(
            self.numel(),
            1,
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    /// Element at a 2-D index (rank-2 tensors only).
    pub fn at2(&self, i: usize, j: usize) -> S {
        assert_eq!(self.shape.len(), 2, "at2 on rank-{} tensor", self.shape.len());
        self.data[i * self.shape[1] + j]
    }

    /// Element at a 3-D index (rank-3 tensors only).
    pub fn at3(&self, i: usize, j: usize, k: usize) -> S {
        assert_eq!(self.shape.len(), 3, "at3 on rank-{} tensor", self.shape.len());
        self.data[(i * self.shape[1] + j) * self.shape[2] + k]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Convert element type (used to promote f32 models to f64 for checks).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(
            self.shape.clone(),
            self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        )
    }
}

impl<S: Scalar> Tensor<S> {
    /// Fill with samples from `f` (used by initializers).
    pub fn generate(shape: Vec<usize>, mut f: impl FnMut() -> S) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..numel).map(|_| f()).collect())
    }
}

pub(crate) fn assert_same_shape<S: Scalar>(op: &str, a: &Tensor<S>, b: &Tensor<S>) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "{}: operand shapes differ: {:?} vs {:?}",
        op,
        a.shape(),
        b.shape()
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_numel() {
        let t = Tensor::<f32>::zeros(vec![2, 3, 4]);
        assert_eq!(t.numel(), 24);
        assert_eq!(t.shape(), &[2, 3, 4]);
    }

    #[test]
    #[should_panic(expected = "does not match shape")]
    fn length_mismatch_panics() {
        let _ = Tensor::<f32>::from_vec(vec![2, 2], vec![1.0; 3]);
    }

    #[test]
    fn reshape_roundtrip_preserves_data() {
        let t = Tensor::<f64>::from_vec(vec![2, 3], (0..6).map(|i| i as f64).collect());
        let orig = t.data().to_vec();
        let back = t.reshaped(vec![3, 2]).reshaped(vec![2, 3]);
        assert_eq!(back.data(), &orig[..]);
    }

    #[test]
    fn cast_roundtrip() {
        let t = Tensor::<f32>::from_vec(vec![3], vec![1.5, -2.0, 0.25]);
        let d: Tensor<f64> = t.cast();
        assert_eq!(d.data(), &[1.5, -2.0, 0.25]);
    }
}
