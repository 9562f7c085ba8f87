//! Axis-aligned boxes in pixel coordinates and the geometry used by both
//! the proposal stage and the evaluator.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate box: ({x_min}, {y_min}, {x_max}, {y_max}) has non-positive extent")]
    DegenerateBox {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
    },
}

/// Axis-aligned box, corners in continuous pixel coordinates.
/// Invariant: `x_min < x_max` and `y_min < y_max`, so area is positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    /// Construct, panicking on a degenerate extent. Use [`BBox::try_new`]
    /// where degenerate candidates are expected and filtered.
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> BBox {
        BBox::try_new(x_min, y_min, x_max, y_max)
            .unwrap_or_else(|e| panic!("{}", e))
    }

    pub fn try_new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<BBox, GeometryError> {
        if !(x_min < x_max && y_min < y_max)
            || !(x_min.is_finite() && y_min.is_finite() && x_max.is_finite() && y_max.is_finite())
        {
            return Err(GeometryError::DegenerateBox {
                x_min,
                y_min,
                x_max,
                y_max,
            });
        }
        Ok(BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Center/size form: (cx, cy, w, h).
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    /// Intersect with the image rectangle `[0,w] x [0,h]`. `None` when the
    /// clipped box has no positive extent.
    pub fn clip(&self, image_w: f64, image_h: f64) -> Option<BBox> {
        BBox::try_new(
            self.x_min.max(0.0),
            self.y_min.max(0.0),
            self.x_max.min(image_w),
            self.y_max.min(image_h),
        )
        .ok()
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x_min <= other.x_min
            && self.y_min <= other.y_min
            && self.x_max >= other.x_max
            && self.y_max >= other.y_max
    }

    /// Scale both corners by a single factor (resize bookkeeping).
    pub fn scaled(&self, factor: f64) -> BBox {
        BBox::new(
            self.x_min * factor,
            self.y_min * factor,
            self.x_max * factor,
            self.y_max * factor,
        )
    }

    /// Mirror horizontally inside an image of width `w`.
    pub fn hflipped(&self, image_w: f64) -> BBox {
        BBox::new(
            image_w - self.x_max,
            self.y_min,
            image_w - self.x_min,
            self.y_max,
        )
    }
}

/// Intersection area over union area, in [0, 1].
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    inter / union
}

/// Faster-R-CNN box parameterization of `gt` relative to `anchor`:
/// `tx = (cx - cxa)/wa`, `ty = (cy - cya)/ha`, `tw = ln(w/wa)`, `th = ln(h/ha)`.
pub fn encode_box(anchor: &BBox, gt: &BBox) -> [f64; 4] {
    let (cxa, cya) = anchor.center();
    let (wa, ha) = (anchor.width(), anchor.height());
    let (cx, cy) = gt.center();
    let (w, h) = (gt.width(), gt.height());
    [
        (cx - cxa) / wa,
        (cy - cya) / ha,
        (w / wa).ln(),
        (h / ha).ln(),
    ]
}

/// Exact inverse of [`encode_box`], then clipped to the image. `None` when
/// the clipped box degenerates.
pub fn decode_box(anchor: &BBox, deltas: [f64; 4], image_w: f64, image_h: f64) -> Option<BBox> {
    let (cxa, cya) = anchor.center();
    let (wa, ha) = (anchor.width(), anchor.height());
    let cx = deltas[0] * wa + cxa;
    let cy = deltas[1] * ha + cya;
    let w = deltas[2].exp() * wa;
    let h = deltas[3].exp() * ha;
    BBox::try_new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
        .ok()?
        .clip(image_w, image_h)
}

/// Inverse of [`encode_box`] without clipping (exact-roundtrip form).
pub fn decode_box_unclipped(anchor: &BBox, deltas: [f64; 4]) -> Option<BBox> {
    let (cxa, cya) = anchor.center();
    let (wa, ha) = (anchor.width(), anchor.height());
    let cx = deltas[0] * wa + cxa;
    let cy = deltas[1] * ha + cya;
    let w = deltas[2].exp() * wa;
    let h = deltas[3].exp() * ha;
    BBox::try_new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0).ok()
}
