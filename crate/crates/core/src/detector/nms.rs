//! Greedy non-maximum suppression.

use super::bbox::{iou, BBox};

/// Keep the highest-scored box, drop every other box whose IoU with it
/// strictly exceeds `threshold`, repeat. Returns the kept *input indices*
/// ordered by descending score; equal scores keep their input order.
pub fn nms_indices(boxes: &[BBox], scores: &[f64], threshold: f64) -> Vec<usize> {
    assert_eq!(
        boxes.len(),
        scores.len(),
        "nms: {} boxes vs {} scores",
        boxes.len(),
        scores.len()
    );
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    // stable sort: ties stay in input order
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));

    let mut kept: Vec<usize> = Vec::new();
    let mut suppressed = vec![false; boxes.len()];
    for &i in &order {
        if suppressed[i] {
            continue;
        }
        kept.push(i);
        for &j in &order {
            if !suppressed[j] && j != i && iou(&boxes[i], &boxes[j]) > threshold {
                suppressed[j] = true;
            }
        }
    }
    kept
}
