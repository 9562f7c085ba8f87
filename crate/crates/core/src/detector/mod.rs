//! Detection geometry and heads: anchors over the feature map, proposal
//! generation with NMS, ROI pooling, and the classification head.

pub mod anchors;
pub mod bbox;
pub mod net;
pub mod nms;

pub use anchors::{generate_anchors, AnchorSpec};
pub use bbox::{decode_box, decode_box_unclipped, encode_box, iou, BBox, GeometryError};
pub use net::{
    detection_head, roi_pool_taps, rpn_forward, taps_cast, RoiHeadParams, RpnParams,
};
pub use nms::nms_indices;

use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor};

/// Scored box emitted by the region proposal network.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    /// Sigmoid of the objectness logit, in [0, 1].
    pub objectness: f64,
}

/// Class-labeled scored box. `class_id` never names the background class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

/// Region proposal network configuration.
/// (`anchors` stays last so the TOML form keeps scalar keys before tables.)
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpnConfig {
    /// Sliding window extent on the feature grid; odd so the window is
    /// symmetric.
    pub kernel_size: usize,
    pub hidden_dim: usize,
    pub nms_iou: f64,
    pub pre_nms_top: usize,
    pub post_nms_top: usize,
    pub anchors: AnchorSpec,
}

impl RpnConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.kernel_size % 2 == 0 {
            return Err(format!(
                "rpn kernel_size must be odd, got {}",
                self.kernel_size
            ));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return Err(format!("rpn nms_iou must lie in (0,1), got {}", self.nms_iou));
        }
        if self.pre_nms_top == 0 || self.post_nms_top == 0 {
            return Err("rpn pre/post NMS keep counts must be positive".into());
        }
        self.anchors.validate().map_err(|e| format!("rpn anchors: {}", e))
    }
}

/// Decode every anchor against the RPN outputs, clip, drop degenerates,
/// keep the `pre_nms_top` best by objectness, suppress at `nms_iou`, keep
/// `post_nms_top`.
///
/// `objectness` is `[g,g,A]` logits and `deltas` is `[g,g,4A]`, both indexed
/// like the anchor list: `(row * g + col) * A + a`.
pub fn propose<S: Scalar>(
    objectness: &Tensor<S>,
    deltas: &Tensor<S>,
    anchors: &[BBox],
    cfg: &RpnConfig,
    image_size: f64,
) -> Vec<Proposal> {
    let n = objectness.numel();
    assert_eq!(n, anchors.len(), "propose: {} logits vs {} anchors", n, anchors.len());
    assert_eq!(
        deltas.numel(),
        4 * n,
        "propose: {} deltas vs {} anchors",
        deltas.numel(),
        anchors.len()
    );
    let obj = objectness.data();
    let dl = deltas.data();

    // decode + clip + filter
    let mut candidates: Vec<(f64, usize, BBox)> = Vec::new();
    for (k, anchor) in anchors.iter().enumerate() {
        let d = [
            dl[4 * k].to_f64(),
            dl[4 * k + 1].to_f64(),
            dl[4 * k + 2].to_f64(),
            dl[4 * k + 3].to_f64(),
        ];
        if let Some(b) = decode_box(anchor, d, image_size, image_size) {
            let logit = obj[k].to_f64();
            let score = 1.0 / (1.0 + (-logit).exp());
            candidates.push((score, k, b));
        }
    }

    // sort by score desc, ties by anchor index
    candidates.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores").then(a.1.cmp(&b.1)));
    candidates.truncate(cfg.pre_nms_top);

    let boxes: Vec<BBox> = candidates.iter().map(|c| c.2).collect();
    let scores: Vec<f64> = candidates.iter().map(|c| c.0).collect();
    let kept = nms_indices(&boxes, &scores, cfg.nms_iou);

    kept.into_iter()
        .take(cfg.post_nms_top)
        .map(|i| Proposal {
            bbox: boxes[i],
            objectness: scores[i],
        })
        .collect()
}

/// Anchor label for RPN training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    /// Matched to the ground-truth box at this index.
    Positive(usize),
    Negative,
    /// Neither clearly foreground nor background; excluded from the loss.
    Ignore,
}

pub const RPN_POSITIVE_IOU: f64 = 0.7;
pub const RPN_NEGATIVE_IOU: f64 = 0.3;

/// Faster-R-CNN style assignment: an anchor is positive when its IoU with
/// some ground truth reaches 0.7, or when it is (one of) the highest-IoU
/// anchors for a ground truth; negative when its best IoU is at most 0.3;
/// ignored otherwise. With no ground truth at all, every anchor is negative.
pub fn assign_rpn_labels(anchors: &[BBox], gts: &[BBox]) -> Vec<AnchorLabel> {
    if gts.is_empty() {
        return vec![AnchorLabel::Negative; anchors.len()];
    }
    let mut labels = vec![AnchorLabel::Ignore; anchors.len()];
    let mut best_gt = vec![0usize; anchors.len()];
    let mut best_iou = vec![0.0f64; anchors.len()];
    let mut gt_best_iou = vec![0.0f64; gts.len()];

    for (ai, anchor) in anchors.iter().enumerate() {
        for (gi, gt) in gts.iter().enumerate() {
            let v = iou(anchor, gt);
            if v > best_iou[ai] {
                best_iou[ai] = v;
                best_gt[ai] = gi;
            }
            if v > gt_best_iou[gi] {
                gt_best_iou[gi] = v;
            }
        }
    }

    for ai in 0..anchors.len() {
        if best_iou[ai] >= RPN_POSITIVE_IOU {
            labels[ai] = AnchorLabel::Positive(best_gt[ai]);
        } else if best_iou[ai] <= RPN_NEGATIVE_IOU {
            labels[ai] = AnchorLabel::Negative;
        }
    }
    // force (ties included) the argmax anchor of every ground truth positive
    for (gi, gt) in gts.iter().enumerate() {
        if gt_best_iou[gi] <= 0.0 {
            continue; // gt overlaps no anchor at all
        }
        for (ai, anchor) in anchors.iter().enumerate() {
            if (iou(anchor, gt) - gt_best_iou[gi]).abs() < 1e-12 {
                labels[ai] = AnchorLabel::Positive(gi);
            }
        }
    }
    labels
}
