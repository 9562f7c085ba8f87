//! Network heads that sit on the feature map: the sliding-kernel RPN and
//! the ROI classification/regression head, plus bilinear ROI pooling.
//!
//! The RPN's per-window fully connected layers are realized as a shared
//! `s x s` convolution followed by two 1x1 convolutions: a 1x1 convolution
//! applied at every sliding-window position computes exactly the same affine
//! map as a fully connected layer applied per window.

use crate::params::{init_he_conv, init_trunc_normal, ParamId, ParamStore, TapeParams};
use crate::rng::Rng;
use crate::tensor::{tape::BilinearTap, Scalar, Tape, TensorId, Tensor};

use super::bbox::BBox;

/// Weights of the region proposal heads.
#[derive(Debug, Clone)]
pub struct RpnParams {
    pub shared_k: ParamId,
    pub shared_b: ParamId,
    pub obj_k: ParamId,
    pub obj_b: ParamId,
    pub delta_k: ParamId,
    pub delta_b: ParamId,
}

impl RpnParams {
    /// `kernel_size` is the sliding window extent `s`, `channels` the
    /// feature-map depth, `anchors` the per-cell anchor count A.
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut Rng,
        kernel_size: usize,
        channels: usize,
        hidden: usize,
        anchors: usize,
    ) -> Self {
        RpnParams {
            shared_k: store.add(
                "rpn.shared.kernel",
                init_he_conv(rng, vec![kernel_size, kernel_size, channels, hidden]),
            ),
            shared_b: store.add("rpn.shared.bias", Tensor::zeros(vec![hidden])),
            obj_k: store.add("rpn.objectness.kernel", init_he_conv(rng, vec![1, 1, hidden, anchors])),
            obj_b: store.add("rpn.objectness.bias", Tensor::zeros(vec![anchors])),
            delta_k: store.add(
                "rpn.delta.kernel",
                init_he_conv(rng, vec![1, 1, hidden, 4 * anchors]),
            ),
            delta_b: store.add("rpn.delta.bias", Tensor::zeros(vec![4 * anchors])),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![
            self.shared_k,
            self.shared_b,
            self.obj_k,
            self.obj_b,
            self.delta_k,
            self.delta_b,
        ]
    }
}

/// Shared `s x s` convolution + relu, then 1x1 heads for objectness logits
/// (`[g,g,A]`) and box deltas (`[g,g,4A]`).
pub fn rpn_forward<S: Scalar>(
    tape: &mut Tape<S>,
    tp: &mut TapeParams<S>,
    params: &RpnParams,
    feature_map: TensorId,
) -> (TensorId, TensorId) {
    let sk = tp.leaf(tape, params.shared_k);
    let sb = tp.leaf(tape, params.shared_b);
    let shared = tape.conv2d(feature_map, sk, sb);
    let shared = tape.relu(shared);

    let ok = tp.leaf(tape, params.obj_k);
    let ob = tp.leaf(tape, params.obj_b);
    let objectness = tape.conv2d(shared, ok, ob);

    let dk = tp.leaf(tape, params.delta_k);
    let db = tp.leaf(tape, params.delta_b);
    let deltas = tape.conv2d(shared, dk, db);
    (objectness, deltas)
}

/// Weights of the ROI classification/regression head.
#[derive(Debug, Clone)]
pub struct RoiHeadParams {
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
    pub cls_w: ParamId,
    pub cls_b: ParamId,
    pub reg_w: ParamId,
    pub reg_b: ParamId,
    pub num_classes: usize,
}

impl RoiHeadParams {
    /// `pooled_len` = q*q*channels; `num_classes` excludes background.
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut Rng,
        pooled_len: usize,
        hidden: usize,
        num_classes: usize,
    ) -> Self {
        RoiHeadParams {
            fc1_w: store.add("roi.fc1.weight", init_trunc_normal(rng, vec![pooled_len, hidden], 0.02)),
            fc1_b: store.add("roi.fc1.bias", Tensor::zeros(vec![hidden])),
            fc2_w: store.add("roi.fc2.weight", init_trunc_normal(rng, vec![hidden, hidden], 0.02)),
            fc2_b: store.add("roi.fc2.bias", Tensor::zeros(vec![hidden])),
            cls_w: store.add(
                "roi.cls.weight",
                init_trunc_normal(rng, vec![hidden, num_classes + 1], 0.02),
            ),
            cls_b: store.add("roi.cls.bias", Tensor::zeros(vec![num_classes + 1])),
            reg_w: store.add(
                "roi.reg.weight",
                init_trunc_normal(rng, vec![hidden, 4 * num_classes], 0.02),
            ),
            reg_b: store.add("roi.reg.bias", Tensor::zeros(vec![4 * num_classes])),
            num_classes,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![
            self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b, self.cls_w, self.cls_b, self.reg_w,
            self.reg_b,
        ]
    }
}

/// Two fully connected layers, then parallel class logits (`[R, K+1]`,
/// background at index K) and per-class box deltas (`[R, 4K]`).
pub fn detection_head<S: Scalar>(
    tape: &mut Tape<S>,
    tp: &mut TapeParams<S>,
    params: &RoiHeadParams,
    pooled_rows: TensorId,
) -> (TensorId, TensorId) {
    let w1 = tp.leaf(tape, params.fc1_w);
    let b1 = tp.leaf(tape, params.fc1_b);
    let h = tape.matmul(pooled_rows, w1);
    let h = tape.add_bias(h, b1);
    let h = tape.relu(h);

    let w2 = tp.leaf(tape, params.fc2_w);
    let b2 = tp.leaf(tape, params.fc2_b);
    let h = tape.matmul(h, w2);
    let h = tape.add_bias(h, b2);
    let h = tape.relu(h);

    let cw = tp.leaf(tape, params.cls_w);
    let cb = tp.leaf(tape, params.cls_b);
    let cls = tape.matmul(h, cw);
    let cls = tape.add_bias(cls, cb);

    let rw = tp.leaf(tape, params.reg_w);
    let rb = tp.leaf(tape, params.reg_b);
    let reg = tape.matmul(h, rw);
    let reg = tape.add_bias(reg, rb);
    (cls, reg)
}

/// Bilinear sampling taps for pooling a box to a `q x q` grid.
///
/// The box is mapped to feature-grid coordinates through the cell-center
/// convention: feature cell (i, j) sits at image point
/// `((j + 0.5) * size/g, (i + 0.5) * size/g)`. One sample is taken at the
/// center of each of the q*q regularly spaced bins, interpolated bilinearly
/// from the four surrounding cells (clamped at the border, weights summing
/// to 1).
pub fn roi_pool_taps(bbox: &BBox, grid: usize, image_size: f64, q: usize) -> Vec<BilinearTap<f64>> {
    assert!(q >= 1, "roi_pool: output size must be at least 1");
    let g = grid as f64;
    let scale = g / image_size;
    let bin_w = bbox.width() / q as f64;
    let bin_h = bbox.height() / q as f64;
    let mut taps = Vec::with_capacity(q * q);
    for bi in 0..q {
        for bj in 0..q {
            let x = bbox.x_min + (bj as f64 + 0.5) * bin_w;
            let y = bbox.y_min + (bi as f64 + 0.5) * bin_h;
            // image point -> continuous feature coordinates
            let u = (x * scale - 0.5).clamp(0.0, g - 1.0);
            let v = (y * scale - 0.5).clamp(0.0, g - 1.0);
            let j0 = u.floor() as usize;
            let i0 = v.floor() as usize;
            let j1 = (j0 + 1).min(grid - 1);
            let i1 = (i0 + 1).min(grid - 1);
            let fu = u - j0 as f64;
            let fv = v - i0 as f64;
            taps.push([
                (i0 * grid + j0, (1.0 - fu) * (1.0 - fv)),
                (i0 * grid + j1, fu * (1.0 - fv)),
                (i1 * grid + j0, (1.0 - fu) * fv),
                (i1 * grid + j1, fu * fv),
            ]);
        }
    }
    taps
}

/// Convert f64 taps to the tape scalar type.
pub fn taps_cast<S: Scalar>(taps: &[BilinearTap<f64>]) -> Vec<BilinearTap<S>> {
    taps.iter()
        .map(|t| {
            [
                (t[0].0, S::from_f64(t[0].1)),
                (t[1].0, S::from_f64(t[1].1)),
                (t[2].0, S::from_f64(t[2].1)),
                (t[3].0, S::from_f64(t[3].1)),
            ]
        })
        .collect()
}
