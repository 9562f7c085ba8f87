//! Reference boxes tied to feature-map cells.

use serde::{Deserialize, Serialize};

use super::bbox::BBox;

/// Anchor shapes per feature cell: every (scale, ratio) combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSpec {
    /// Box side in image pixels at ratio 1.
    pub scales: Vec<f64>,
    /// Width/height ratios; area is preserved across ratios.
    pub aspect_ratios: Vec<f64>,
}

impl AnchorSpec {
    /// Anchors per feature cell.
    pub fn per_cell(&self) -> usize {
        self.scales.len() * self.aspect_ratios.len()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.scales.is_empty() || self.aspect_ratios.is_empty() {
            return Err("anchor spec needs at least one scale and one ratio".into());
        }
        if self.scales.iter().any(|&s| s <= 0.0) {
            return Err(format!("anchor scales must be positive, got {:?}", self.scales));
        }
        if self.aspect_ratios.iter().any(|&r| r <= 0.0) {
            return Err(format!(
                "anchor aspect ratios must be positive, got {:?}",
                self.aspect_ratios
            ));
        }
        Ok(())
    }
}

/// One anchor per (cell, scale, ratio), centered on the cell mapped back to
/// image coordinates. Index layout matches the RPN head tensors:
/// `(row * g + col) * A + a` with `a = scale_idx * n_ratios + ratio_idx`.
/// Anchors may extend past the image edge; clipping happens at proposal
/// time.
pub fn generate_anchors(grid: usize, image_size: f64, spec: &AnchorSpec) -> Vec<BBox> {
    assert!(grid >= 1, "anchor grid must be at least 1x1");
    let cell = image_size / grid as f64;
    let mut out = Vec::with_capacity(grid * grid * spec.per_cell());
    for row in 0..grid {
        for col in 0..grid {
            let cx = (col as f64 + 0.5) * cell;
            let cy = (row as f64 + 0.5) * cell;
            for &scale in &spec.scales {
                for &ratio in &spec.aspect_ratios {
                    let w = scale * ratio.sqrt();
                    let h = scale / ratio.sqrt();
                    out.push(BBox::from_center(cx, cy, w, h));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_is_grid_squared_times_per_cell() {
        let spec = AnchorSpec {
            scales: vec![8.0, 16.0, 24.0],
            aspect_ratios: vec![1.0],
        };
        assert_eq!(spec.per_cell(), 3);
        assert_eq!(generate_anchors(7, 96.0, &spec).len(), 147);
    }

    #[test]
    fn unit_ratio_box_is_center_plus_minus_half_scale() {
        let spec = AnchorSpec {
            scales: vec![16.0],
            aspect_ratios: vec![1.0],
        };
        // 2x2 grid over a 192px image: cell size 96, centers at 48 and 144.
        // Cell (0,0) centered at (48,48) with scale 16 spans center +- 8.
        let anchors = generate_anchors(2, 192.0, &spec);
        assert_eq!(anchors[0], BBox::new(40.0, 40.0, 56.0, 56.0));
    }

    #[test]
    fn two_by_two_grid_matches_hand_enumeration() {
        // image 32, grid 2 -> cell 16, centers at 8 and 24; scale 16 ratio 1
        let spec = AnchorSpec {
            scales: vec![16.0],
            aspect_ratios: vec![1.0],
        };
        let anchors = generate_anchors(2, 32.0, &spec);
        let expect = [
            BBox::new(0.0, 0.0, 16.0, 16.0),   // row 0, col 0: center (8,8)
            BBox::new(16.0, 0.0, 32.0, 16.0),  // row 0, col 1: center (24,8)
            BBox::new(0.0, 16.0, 16.0, 32.0),  // row 1, col 0: center (8,24)
            BBox::new(16.0, 16.0, 32.0, 32.0), // row 1, col 1: center (24,24)
        ];
        assert_eq!(anchors, expect);
    }

    #[test]
    fn ratios_preserve_area() {
        let spec = AnchorSpec {
            scales: vec![16.0],
            aspect_ratios: vec![0.5, 1.0, 2.0],
        };
        for a in generate_anchors(1, 32.0, &spec) {
            assert!((a.area() - 256.0).abs() < 1e-9);
        }
    }

    #[test]
    fn edge_anchors_may_extend_past_bounds() {
        let spec = AnchorSpec {
            scales: vec![24.0],
            aspect_ratios: vec![1.0],
        };
        let anchors = generate_anchors(4, 32.0, &spec);
        assert!(anchors[0].x_min < 0.0 && anchors[0].y_min < 0.0);
    }
}
