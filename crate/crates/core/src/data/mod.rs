//! Datasets: synthetic-shapes generation, COCO-format annotation ingestion,
//! image decoding, resizing and normalization.

pub mod coco;
pub mod imageio;
pub mod synthetic;

pub use coco::{load_coco_json, save_coco_entries, save_coco_json, CocoEntry, CocoLoad};
pub use synthetic::{generate_synthetic, generate_synthetic_raw, RawImage, SYNTHETIC_CLASS_NAMES};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::BBox;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed annotation file {path}: {message}")]
    Malformed { path: String, message: String },
    #[error("annotation {annotation_id} references unknown category {category_id}")]
    UnknownCategory {
        annotation_id: u64,
        category_id: i64,
    },
    #[error("annotation {annotation_id} references unknown image {image_id}")]
    UnknownImage { annotation_id: u64, image_id: i64 },
    #[error("unsupported image format in {path}: {message}")]
    BadImage { path: String, message: String },
}

/// One labeled box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub bbox: BBox,
    pub class_id: usize,
}

/// Decoded, normalized image plus its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    /// `[H, W, C]`, per-channel normalized to [-1, 1].
    pub pixels: Tensor<f32>,
    pub annotations: Vec<Annotation>,
    pub source_id: String,
}

impl ImageSample {
    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }
    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }
    pub fn channels(&self) -> usize {
        self.pixels.shape()[2]
    }

    /// Mirror pixels and boxes left-right.
    pub fn hflipped(&self) -> ImageSample {
        let (h, w, c) = (self.height(), self.width(), self.channels());
        let src = self.pixels.data();
        let mut out = vec![0.0f32; src.len()];
        for y in 0..h {
            for x in 0..w {
                let s = (y * w + x) * c;
                let d = (y * w + (w - 1 - x)) * c;
                out[d..d + c].copy_from_slice(&src[s..s + c]);
            }
        }
        ImageSample {
            pixels: Tensor::from_vec(vec![h, w, c], out),
            annotations: self
                .annotations
                .iter()
                .map(|a| Annotation {
                    bbox: a.bbox.hflipped(w as f64),
                    class_id: a.class_id,
                })
                .collect(),
            source_id: self.source_id.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Ordered dataset with its label vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub samples: Vec<ImageSample>,
    pub class_names: Vec<String>,
    pub split: Split,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<(), String> {
        for s in &self.samples {
            let (w, h) = (s.width() as f64, s.height() as f64);
            for a in &s.annotations {
                if a.class_id >= self.class_names.len() {
                    return Err(format!(
                        "sample {}: class id {} out of range (K = {})",
                        s.source_id,
                        a.class_id,
                        self.class_names.len()
                    ));
                }
                if a.bbox.x_min < 0.0 || a.bbox.y_min < 0.0 || a.bbox.x_max > w || a.bbox.y_max > h
                {
                    return Err(format!(
                        "sample {}: box {:?} leaves the {}x{} image",
                        s.source_id, a.bbox, w, h
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Map a raw 8-bit channel value to the model's input range:
/// `(x/255 - 0.5) / 0.5`.
pub fn normalize_u8(v: u8) -> f32 {
    (v as f32 / 255.0 - 0.5) / 0.5
}

/// Inverse of [`normalize_u8`], saturating.
pub fn denormalize_to_u8(v: f32) -> u8 {
    ((v * 0.5 + 0.5) * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Pixels-to-tensor conversion for an RGB8 buffer.
pub fn normalize_rgb8(pixels: &[u8], h: usize, w: usize, c: usize) -> Tensor<f32> {
    assert_eq!(pixels.len(), h * w * c);
    Tensor::from_vec(vec![h, w, c], pixels.iter().map(|&v| normalize_u8(v)).collect())
}

/// Round-half-up for positive quantities.
fn round_half_up(v: f64) -> usize {
    (v + 0.5).floor() as usize
}

/// Scale a sample so its shorter edge equals `target`, preserving aspect
/// ratio. Output extents are rounded half-up; pixels are bilinearly
/// interpolated and boxes scaled by the same factor.
pub fn resize_shorter_edge(sample: &ImageSample, target: usize) -> ImageSample {
    assert!(target >= 1, "resize target must be at least 1");
    let (h, w, c) = (sample.height(), sample.width(), sample.channels());
    let shorter = h.min(w);
    let factor = target as f64 / shorter as f64;
    let (nh, nw) = if h <= w {
        (target, round_half_up(w as f64 * factor))
    } else {
        (round_half_up(h as f64 * factor), target)
    };
    if nh == h && nw == w {
        return sample.clone();
    }

    let src = sample.pixels.data();
    let mut out = vec![0.0f32; nh * nw * c];
    let sx = w as f64 / nw as f64;
    let sy = h as f64 / nh as f64;
    for y in 0..nh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for x in 0..nw {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for ch in 0..c {
                let p00 = src[(y0 * w + x0) * c + ch] as f64;
                let p01 = src[(y0 * w + x1) * c + ch] as f64;
                let p10 = src[(y1 * w + x0) * c + ch] as f64;
                let p11 = src[(y1 * w + x1) * c + ch] as f64;
                let top = p00 * (1.0 - wx) + p01 * wx;
                let bot = p10 * (1.0 - wx) + p11 * wx;
                out[(y * nw + x) * c + ch] = (top * (1.0 - wy) + bot * wy) as f32;
            }
        }
    }

    let annotations = sample
        .annotations
        .iter()
        .map(|a| Annotation {
            bbox: a.bbox.scaled(factor),
            class_id: a.class_id,
        })
        .collect();
    ImageSample {
        pixels: Tensor::from_vec(vec![nh, nw, c], out),
        annotations,
        source_id: sample.source_id.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_sample(h: usize, w: usize, boxes: Vec<(f64, f64, f64, f64)>) -> ImageSample {
        ImageSample {
            pixels: Tensor::zeros(vec![h, w, 3]),
            annotations: boxes
                .into_iter()
                .map(|(a, b, c, d)| Annotation {
                    bbox: BBox::new(a, b, c, d),
                    class_id: 0,
                })
                .collect(),
            source_id: "t".into(),
        }
    }

    #[test]
    fn resize_640x480_to_800_gives_1067x800() {
        // 640 * (800/480) = 1066.666..., rounded half-up to 1067
        let s = flat_sample(480, 640, vec![]);
        let r = resize_shorter_edge(&s, 800);
        assert_eq!(r.height(), 800);
        assert_eq!(r.width(), 1067);
    }

    #[test]
    fn resize_identity_when_target_matches() {
        let s = flat_sample(96, 96, vec![(3.0, 4.0, 20.0, 30.0)]);
        let r = resize_shorter_edge(&s, 96);
        assert_eq!(r, s);
    }

    #[test]
    fn boxes_scale_by_exact_ratio() {
        // 480-short image scaled to 800: factor 5/3
        let s = flat_sample(480, 640, vec![(0.0, 0.0, 48.0, 48.0)]);
        let r = resize_shorter_edge(&s, 800);
        let b = r.annotations[0].bbox;
        assert!((b.x_max - 80.0).abs() < 1e-9);
        assert!((b.y_max - 80.0).abs() < 1e-9);
    }

    #[test]
    fn resize_keeps_boxes_inside_image() {
        let s = flat_sample(48, 64, vec![(0.0, 0.0, 64.0, 48.0), (10.0, 8.0, 30.5, 47.0)]);
        let r = resize_shorter_edge(&s, 100);
        let (w, h) = (r.width() as f64, r.height() as f64);
        for a in &r.annotations {
            assert!(a.bbox.x_max <= w + 1.0 && a.bbox.y_max <= h + 1.0);
        }
    }

    #[test]
    fn hflip_mirrors_boxes() {
        let s = flat_sample(10, 20, vec![(2.0, 1.0, 5.0, 4.0)]);
        let f = s.hflipped();
        assert_eq!(f.annotations[0].bbox, BBox::new(15.0, 1.0, 18.0, 4.0));
        // flipping twice restores the original
        assert_eq!(f.hflipped(), s);
    }

    #[test]
    fn normalization_roundtrip() {
        for v in [0u8, 1, 127, 128, 254, 255] {
            assert_eq!(denormalize_to_u8(normalize_u8(v)), v);
        }
        assert_eq!(normalize_u8(0), -1.0);
        assert_eq!(normalize_u8(255), 1.0);
    }
}
