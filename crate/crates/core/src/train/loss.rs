//! Training losses: sampled binary cross-entropy + smooth-L1 for the RPN,
//! and (K+1)-way cross-entropy + per-class smooth-L1 for the ROI head.

use crate::detector::{encode_box, iou, AnchorLabel, BBox};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tape, TensorId};

/// Smooth-L1 transition point.
pub const SMOOTH_L1_BETA: f64 = 1.0;
/// Anchors sampled per image for the RPN loss, at up to 1:1 pos:neg.
pub const RPN_SAMPLE_ANCHORS: usize = 256;
/// An ROI is positive when its best ground-truth IoU reaches this value.
pub const ROI_POSITIVE_IOU: f64 = 0.5;

/// Scalar values of the loss components, for logging.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
}

/// Anchor subset drawn for one image's RPN loss.
#[derive(Debug, Clone)]
pub struct RpnSample {
    /// Flat anchor indices entering the objectness term.
    pub indices: Vec<usize>,
    /// 1.0 for positive anchors, 0.0 for negatives, parallel to `indices`.
    pub labels: Vec<f64>,
    /// (anchor index, regression target) for the sampled positives.
    pub positives: Vec<(usize, [f64; 4])>,
}

/// Draw up to [`RPN_SAMPLE_ANCHORS`] anchors at a 1:1 pos:neg ratio:
/// positives capped at half the budget, negatives matched to the positive
/// count. An image with no positives falls back to a negatives-only sample
/// (objectness-only loss). Ignored anchors never enter the loss.
pub fn sample_rpn_anchors(
    labels: &[AnchorLabel],
    anchors: &[BBox],
    gt_boxes: &[BBox],
    rng: &mut Rng,
) -> RpnSample {
    let mut pos: Vec<usize> = Vec::new();
    let mut neg: Vec<usize> = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        match l {
            AnchorLabel::Positive(_) => pos.push(i),
            AnchorLabel::Negative => neg.push(i),
            AnchorLabel::Ignore => {}
        }
    }
    let pos_quota = RPN_SAMPLE_ANCHORS / 2;
    let keep_pos: Vec<usize> = if pos.len() > pos_quota {
        rng.sample_indices(pos.len(), pos_quota)
            .into_iter()
            .map(|i| pos[i])
            .collect()
    } else {
        pos
    };
    let neg_quota = if keep_pos.is_empty() {
        RPN_SAMPLE_ANCHORS
    } else {
        keep_pos.len()
    };
    let keep_neg: Vec<usize> = if neg.len() > neg_quota {
        rng.sample_indices(neg.len(), neg_quota)
            .into_iter()
            .map(|i| neg[i])
            .collect()
    } else {
        neg
    };

    let mut indices = Vec::with_capacity(keep_pos.len() + keep_neg.len());
    let mut lab = Vec::with_capacity(indices.capacity());
    let mut positives = Vec::with_capacity(keep_pos.len());
    for &i in &keep_pos {
        indices.push(i);
        lab.push(1.0);
        if let AnchorLabel::Positive(gi) = labels[i] {
            positives.push((i, encode_box(&anchors[i], &gt_boxes[gi])));
        }
    }
    for &i in &keep_neg {
        indices.push(i);
        lab.push(0.0);
    }
    RpnSample {
        indices,
        labels: lab,
        positives,
    }
}

/// Binary cross-entropy over the sampled objectness logits plus smooth-L1
/// on positive-anchor deltas against their encoded targets, both normalized
/// by the sample count. With no positives the regression term is exactly
/// zero (absent).
///
/// `objectness` is `[g,g,A]`, `deltas` is `[g,g,4A]`, flat anchor index
/// `(row * g + col) * A + a`.
pub fn rpn_loss<S: Scalar>(
    tape: &mut Tape<S>,
    objectness: TensorId,
    deltas: TensorId,
    sample: &RpnSample,
) -> (TensorId, LossParts) {
    assert!(
        !sample.indices.is_empty(),
        "rpn_loss: empty anchor sample (a valid grid always yields negatives)"
    );
    let n = tape.tensor(objectness).numel();
    let flat_obj = tape.reshape(objectness, vec![n]);
    let picked = tape.gather(flat_obj, sample.indices.clone());
    let targets: Vec<S> = sample.labels.iter().map(|&t| S::from_f64(t)).collect();
    let cls = tape.bce_with_logits_mean(picked, targets);
    let cls_val = tape.data(cls)[0].to_f64();

    if sample.positives.is_empty() {
        return (
            cls,
            LossParts {
                total: cls_val,
                cls: cls_val,
                reg: 0.0,
            },
        );
    }

    let dn = tape.tensor(deltas).numel();
    let flat_deltas = tape.reshape(deltas, vec![dn]);
    let mut idx = Vec::with_capacity(4 * sample.positives.len());
    let mut tgt: Vec<S> = Vec::with_capacity(idx.capacity());
    for &(anchor_idx, t) in &sample.positives {
        for j in 0..4 {
            idx.push(4 * anchor_idx + j);
            tgt.push(S::from_f64(t[j]));
        }
    }
    let picked_deltas = tape.gather(flat_deltas, idx);
    let sl1 = tape.smooth_l1_sum(picked_deltas, tgt, S::from_f64(SMOOTH_L1_BETA));
    let reg = tape.mul_scalar(sl1, S::from_f64(1.0 / sample.indices.len() as f64));
    let reg_val = tape.data(reg)[0].to_f64();
    let total = tape.add(cls, reg);
    (
        total,
        LossParts {
            total: cls_val + reg_val,
            cls: cls_val,
            reg: reg_val,
        },
    )
}

/// One sampled ROI: its box, assigned label (`num_classes` = background)
/// and, for positives, the encoded regression target.
#[derive(Debug, Clone)]
pub struct RoiExample {
    pub bbox: BBox,
    pub label: usize,
    pub target: Option<[f64; 4]>,
}

/// Assign candidate boxes against ground truth (positive at IoU >= 0.5) and
/// sample at up to 1:3 pos:neg, `rois_per_image` total.
pub fn sample_rois(
    candidates: &[BBox],
    gts: &[(BBox, usize)],
    num_classes: usize,
    rois_per_image: usize,
    rng: &mut Rng,
) -> Vec<RoiExample> {
    let mut pos: Vec<RoiExample> = Vec::new();
    let mut neg: Vec<RoiExample> = Vec::new();
    for &candidate in candidates {
        let mut best: Option<(usize, f64)> = None;
        for (gi, (gt, _)) in gts.iter().enumerate() {
            let v = iou(&candidate, gt);
            if best.map_or(true, |(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        match best {
            Some((gi, v)) if v >= ROI_POSITIVE_IOU => pos.push(RoiExample {
                bbox: candidate,
                label: gts[gi].1,
                target: Some(encode_box(&candidate, &gts[gi].0)),
            }),
            _ => neg.push(RoiExample {
                bbox: candidate,
                label: num_classes,
                target: None,
            }),
        }
    }
    let pos_quota = rois_per_image / 4;
    let keep_pos: Vec<RoiExample> = if pos.len() > pos_quota {
        rng.sample_indices(pos.len(), pos_quota)
            .into_iter()
            .map(|i| pos[i].clone())
            .collect()
    } else {
        pos
    };
    let neg_quota = rois_per_image - keep_pos.len();
    let keep_neg: Vec<RoiExample> = if neg.len() > neg_quota {
        rng.sample_indices(neg.len(), neg_quota)
            .into_iter()
            .map(|i| neg[i].clone())
            .collect()
    } else {
        neg
    };
    let mut out = keep_pos;
    out.extend(keep_neg);
    out
}

/// Cross-entropy over K+1 classes plus smooth-L1 on the ground-truth
/// class's delta slice for positive ROIs, regression normalized by the ROI
/// count. With no positive ROIs the loss is classification-only.
///
/// `class_logits` is `[R, K+1]`, `box_deltas` is `[R, 4K]`.
pub fn roi_loss<S: Scalar>(
    tape: &mut Tape<S>,
    class_logits: TensorId,
    box_deltas: TensorId,
    examples: &[RoiExample],
) -> (TensorId, LossParts) {
    let r = examples.len();
    assert!(r > 0, "roi_loss: no sampled ROIs");
    assert_eq!(tape.shape(class_logits)[0], r);
    let classes: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let cls = tape.softmax_ce_mean(class_logits, classes);
    let cls_val = tape.data(cls)[0].to_f64();

    let four_k = tape.shape(box_deltas)[1];
    let mut idx = Vec::new();
    let mut tgt: Vec<S> = Vec::new();
    for (row, e) in examples.iter().enumerate() {
        if let Some(t) = e.target {
            for j in 0..4 {
                idx.push(row * four_k + 4 * e.label + j);
                tgt.push(S::from_f64(t[j]));
            }
        }
    }
    if idx.is_empty() {
        return (
            cls,
            LossParts {
                total: cls_val,
                cls: cls_val,
                reg: 0.0,
            },
        );
    }
    let dn = tape.tensor(box_deltas).numel();
    let flat = tape.reshape(box_deltas, vec![dn]);
    let picked = tape.gather(flat, idx);
    let sl1 = tape.smooth_l1_sum(picked, tgt, S::from_f64(SMOOTH_L1_BETA));
    let reg = tape.mul_scalar(sl1, S::from_f64(1.0 / r as f64));
    let reg_val = tape.data(reg)[0].to_f64();
    let total = tape.add(cls, reg);
    (
        total,
        LossParts {
            total: cls_val + reg_val,
            cls: cls_val,
            reg: reg_val,
        },
    )
}
