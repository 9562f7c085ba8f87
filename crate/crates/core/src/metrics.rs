//! Detection-to-ground-truth matching and COCO-style average precision,
//! including size-bucketed AP.
//!
//! AP uses 101-point interpolation: the precision envelope (running max from
//! the right) sampled at recalls 0.00, 0.01, ..., 1.00 and averaged. The
//! headline `ap` averages over IoU thresholds 0.50:0.05:0.95 and over
//! classes; `ap50` is the same at the single 0.50 threshold. Size buckets
//! restrict ground truth by area; detections whose only match is an
//! out-of-bucket ground truth are ignored rather than counted as false
//! positives, and buckets with no ground truth anywhere report the
//! `undefined` sentinel (`null` in JSON) and are excluded from means.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DatasetManifest;
use crate::detector::{iou, BBox, Detection};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("detections reference unknown image id {0:?}")]
    UnknownImageId(String),
}

/// COCO-convention size buckets, areas in pixels of the evaluated scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeBuckets {
    /// Exclusive upper bound of the small bucket (32^2).
    pub small_max: f64,
    /// Exclusive lower bound of the large bucket (96^2).
    pub large_min: f64,
}

impl Default for SizeBuckets {
    fn default() -> Self {
        SizeBuckets {
            small_max: 32.0 * 32.0,
            large_min: 96.0 * 96.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bucket {
    All,
    Small,
    Medium,
    Large,
}

impl Bucket {
    fn admits(self, area: f64, b: &SizeBuckets) -> bool {
        match self {
            Bucket::All => true,
            Bucket::Small => area < b.small_max,
            Bucket::Medium => area >= b.small_max && area <= b.large_min,
            Bucket::Large => area > b.large_min,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub buckets: SizeBuckets,
    /// Per-image cap on evaluated detections (highest scores kept).
    pub max_detections: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            buckets: SizeBuckets::default(),
            max_detections: 100,
        }
    }
}

/// The ten COCO IoU thresholds 0.50:0.05:0.95.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClassAp {
    pub class_id: usize,
    pub name: String,
    /// Mean over IoU thresholds; `null` when the class has no ground truth.
    pub ap: Option<f64>,
}

/// Evaluation summary. `None` fields mark buckets (or a whole dataset)
/// with no ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub schema_version: u32,
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    pub per_class: Vec<PerClassAp>,
    pub num_images: usize,
    pub num_detections: usize,
}

pub const EVAL_SCHEMA_VERSION: u32 = 1;

/// Per-detection matching outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchFlag {
    /// Matched the ground truth at this index.
    Tp(usize),
    Fp,
    /// Matched only an ignored ground truth; excluded from the PR curve.
    Ignored,
}

/// Greedy single-class matching. `dets` must be sorted by descending score
/// (ties by input order). Each detection takes the highest-IoU unmatched
/// ground truth with IoU >= `iou_thresh`; every ground truth matches at most
/// once. A detection whose only available match is flagged in `ignore` is
/// marked [`MatchFlag::Ignored`] and consumes that ground truth.
pub fn match_detections(
    dets: &[&Detection],
    gts: &[BBox],
    ignore: &[bool],
    iou_thresh: f64,
) -> Vec<MatchFlag> {
    assert_eq!(gts.len(), ignore.len());
    let mut taken = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(dets.len());
    for det in dets {
        let mut best_live: Option<(usize, f64)> = None;
        let mut best_ignored: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if taken[gi] {
                continue;
            }
            let v = iou(&det.bbox, gt);
            if v < iou_thresh {
                continue;
            }
            let slot = if ignore[gi] { &mut best_ignored } else { &mut best_live };
            if slot.map_or(true, |(_, bv)| v > bv) {
                *slot = Some((gi, v));
            }
        }
        if let Some((gi, _)) = best_live {
            taken[gi] = true;
            flags.push(MatchFlag::Tp(gi));
        } else if let Some((gi, _)) = best_ignored {
            taken[gi] = true;
            flags.push(MatchFlag::Ignored);
        } else {
            flags.push(MatchFlag::Fp);
        }
    }
    flags
}

/// 101-point interpolated average precision from a ranked TP/FP sequence.
/// `None` when there is no ground truth to recall.
pub fn average_precision(ranked_tp: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    if ranked_tp.is_empty() {
        return Some(0.0);
    }
    let mut recalls = Vec::with_capacity(ranked_tp.len());
    let mut precisions = Vec::with_capacity(ranked_tp.len());
    let mut tp = 0usize;
    for (i, &is_tp) in ranked_tp.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        recalls.push(tp as f64 / n_gt as f64);
        precisions.push(tp as f64 / (i + 1) as f64);
    }
    // precision envelope: running max from the right
    for i in (0..precisions.len() - 1).rev() {
        if precisions[i + 1] > precisions[i] {
            precisions[i] = precisions[i + 1];
        }
    }
    let mut total = 0.0;
    let mut idx = 0usize;
    for step in 0..=100 {
        let q = step as f64 / 100.0;
        while idx < recalls.len() && recalls[idx] < q - 1e-12 {
            idx += 1;
        }
        if idx < recalls.len() {
            total += precisions[idx];
        }
    }
    Some(total / 101.0)
}

struct ClassEval {
    /// (score, image order, det order, flag) for the PR curve.
    records: Vec<(f64, usize, usize, bool)>,
    n_gt: usize,
}

/// Match one (class, threshold, bucket) slice across all images.
fn eval_class_threshold(
    dets_per_image: &[Vec<&Detection>],
    gts_per_image: &[Vec<(BBox, bool)>], // (box, ignored)
    iou_thresh: f64,
) -> ClassEval {
    let mut records = Vec::new();
    let mut n_gt = 0usize;
    for (img_idx, dets) in dets_per_image.iter().enumerate() {
        let gts: Vec<BBox> = gts_per_image[img_idx].iter().map(|g| g.0).collect();
        let ignore: Vec<bool> = gts_per_image[img_idx].iter().map(|g| g.1).collect();
        n_gt += ignore.iter().filter(|&&ig| !ig).count();
        let flags = match_detections(dets, &gts, &ignore, iou_thresh);
        for (di, (det, flag)) in dets.iter().zip(&flags).enumerate() {
            match flag {
                MatchFlag::Tp(_) => records.push((det.score, img_idx, di, true)),
                MatchFlag::Fp => records.push((det.score, img_idx, di, false)),
                MatchFlag::Ignored => {}
            }
        }
    }
    // global ranking: score desc, ties by (image order, det order)
    records.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .expect("finite scores")
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    ClassEval { records, n_gt }
}

fn mean_of_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values.flatten() {
        sum += v;
        n += 1;
    }
    if n == 0 {
        None
    } else {
        Some(sum / n as f64)
    }
}

/// Evaluate detections (keyed by `source_id`) against a manifest.
pub fn evaluate(
    dets_by_image: &BTreeMap<String, Vec<Detection>>,
    manifest: &DatasetManifest,
    opts: &EvalOptions,
) -> Result<EvalResult, EvalError> {
    for key in dets_by_image.keys() {
        if !manifest.samples.iter().any(|s| &s.source_id == key) {
            return Err(EvalError::UnknownImageId(key.clone()));
        }
    }
    let k = manifest.num_classes();
    let thresholds = coco_iou_thresholds();

    // per-image capped, score-ordered detections (ties keep input order)
    let empty: Vec<Detection> = Vec::new();
    let capped: Vec<Vec<&Detection>> = manifest
        .samples
        .iter()
        .map(|s| {
            let dets = dets_by_image.get(&s.source_id).unwrap_or(&empty);
            let mut order: Vec<usize> = (0..dets.len()).collect();
            order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).expect("finite scores"));
            order
                .into_iter()
                .take(opts.max_detections)
                .map(|i| &dets[i])
                .collect()
        })
        .collect();
    let num_detections = capped.iter().map(|d| d.len()).sum();

    // ap[class][threshold] per bucket
    let buckets = [Bucket::All, Bucket::Small, Bucket::Medium, Bucket::Large];
    let mut bucket_ap: Vec<Vec<Vec<Option<f64>>>> = Vec::new(); // [bucket][class][threshold]
    for bucket in buckets {
        let mut class_aps = Vec::with_capacity(k);
        for class in 0..k {
            let dets_per_image: Vec<Vec<&Detection>> = capped
                .iter()
                .map(|dets| dets.iter().copied().filter(|d| d.class_id == class).collect())
                .collect();
            let gts_per_image: Vec<Vec<(BBox, bool)>> = manifest
                .samples
                .iter()
                .map(|s| {
                    s.annotations
                        .iter()
                        .filter(|a| a.class_id == class)
                        .map(|a| (a.bbox, !bucket.admits(a.bbox.area(), &opts.buckets)))
                        .collect()
                })
                .collect();
            let aps: Vec<Option<f64>> = thresholds
                .iter()
                .map(|&t| {
                    let ce = eval_class_threshold(&dets_per_image, &gts_per_image, t);
                    let ranked: Vec<bool> = ce.records.iter().map(|r| r.3).collect();
                    average_precision(&ranked, ce.n_gt)
                })
                .collect();
            class_aps.push(aps);
        }
        bucket_ap.push(class_aps);
    }

    // reductions: mean over thresholds per class, then over defined classes
    let class_mean = |class_aps: &Vec<Vec<Option<f64>>>, class: usize| -> Option<f64> {
        mean_of_defined(class_aps[class].iter().copied())
    };
    let headline = |bucket_idx: usize| -> Option<f64> {
        mean_of_defined((0..k).map(|c| class_mean(&bucket_ap[bucket_idx], c)))
    };

    let per_class: Vec<PerClassAp> = (0..k)
        .map(|c| PerClassAp {
            class_id: c,
            name: manifest.class_names[c].clone(),
            ap: class_mean(&bucket_ap[0], c),
        })
        .collect();

    Ok(EvalResult {
        schema_version: EVAL_SCHEMA_VERSION,
        ap: headline(0),
        ap50: mean_of_defined((0..k).map(|c| bucket_ap[0][c][0])),
        ap_small: headline(1),
        ap_medium: headline(2),
        ap_large: headline(3),
        per_class,
        num_images: manifest.samples.len(),
        num_detections,
    })
}
