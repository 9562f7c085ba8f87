//! Synthetic-shapes dataset: uniform background plus 1-3 filled
//! rectangles, ellipses and triangles with exact ground-truth boxes.
//! Byte-deterministic for a given seed.

use crate::detector::{iou, BBox};
use crate::rng::Rng;

use super::imageio::Rgb8Image;
use super::{normalize_rgb8, Annotation, DatasetManifest, ImageSample, Split};

pub const SYNTHETIC_CLASS_NAMES: [&str; 3] = ["rectangle", "ellipse", "triangle"];

const MIN_EXTENT: usize = 10; // >= 8 px required of every shape
const MAX_OVERLAP_IOU: f64 = 0.05;
const MIN_COLOR_DIST: u32 = 120; // L1 rgb distance from background

/// Undecoded synthetic image.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    pub image: Rgb8Image,
    pub annotations: Vec<Annotation>,
    pub source_id: String,
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rectangle,
    Ellipse,
    Triangle,
}

impl Shape {
    fn class_id(self) -> usize {
        match self {
            Shape::Rectangle => 0,
            Shape::Ellipse => 1,
            Shape::Triangle => 2,
        }
    }

    fn from_class(class: usize) -> Shape {
        match class {
            0 => Shape::Rectangle,
            1 => Shape::Ellipse,
            _ => Shape::Triangle,
        }
    }
}

fn color_dist(a: [u8; 3], b: [u8; 3]) -> u32 {
    a.iter()
        .zip(&b)
        .map(|(&x, &y)| (x as i32 - y as i32).unsigned_abs())
        .sum()
}

/// Is the center of pixel (px, py) inside the shape bounded by `(x0..x1, y0..y1)`?
fn covers(shape: Shape, x0: usize, y0: usize, x1: usize, y1: usize, px: usize, py: usize) -> bool {
    let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
    let (fx0, fy0, fx1, fy1) = (x0 as f64, y0 as f64, x1 as f64, y1 as f64);
    match shape {
        Shape::Rectangle => true, // the iterated pixels already lie in the box
        Shape::Ellipse => {
            let (ecx, ecy) = ((fx0 + fx1) / 2.0, (fy0 + fy1) / 2.0);
            let (a, b) = ((fx1 - fx0) / 2.0, (fy1 - fy0) / 2.0);
            let dx = (cx - ecx) / a;
            let dy = (cy - ecy) / b;
            dx * dx + dy * dy <= 1.0
        }
        Shape::Triangle => {
            // apex at the top-edge midpoint, base along the bottom edge
            let ax = (fx0 + fx1) / 2.0;
            let ay = fy0;
            let (bx, by) = (fx0, fy1);
            let (cx2, cy2) = (fx1, fy1);
            let sign = |p1: (f64, f64), p2: (f64, f64), p3: (f64, f64)| {
                (p1.0 - p3.0) * (p2.1 - p3.1) - (p2.0 - p3.0) * (p1.1 - p3.1)
            };
            let d1 = sign((cx, cy), (ax, ay), (bx, by));
            let d2 = sign((cx, cy), (bx, by), (cx2, cy2));
            let d3 = sign((cx, cy), (cx2, cy2), (ax, ay));
            let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
            let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
            !(has_neg && has_pos)
        }
    }
}

/// Generate `count` square images of side `image_size`. Each image gets a
/// random background and 1-3 non-overlapping shapes, class chosen uniformly;
/// ground-truth boxes are the exact shape bounds.
pub fn generate_synthetic_raw(count: usize, image_size: usize, seed: u64) -> Vec<RawImage> {
    assert!(count >= 1, "synthetic dataset needs at least one image");
    assert!(
        image_size >= 2 * MIN_EXTENT,
        "image size {} too small for {}px shapes",
        image_size,
        MIN_EXTENT
    );
    (0..count)
        .map(|idx| {
            let mut rng = Rng::derive(seed, idx as u64);
            let bg = [
                rng.below(256) as u8,
                rng.below(256) as u8,
                rng.below(256) as u8,
            ];
            let mut pixels = Vec::with_capacity(image_size * image_size * 3);
            for _ in 0..image_size * image_size {
                pixels.extend_from_slice(&bg);
            }

            let n_shapes = 1 + rng.below(3);
            let max_extent = (image_size / 2).min(44);
            let mut annotations: Vec<Annotation> = Vec::new();
            for _ in 0..n_shapes {
                // rejection-place a box that barely overlaps existing shapes
                let mut placed = None;
                for _ in 0..60 {
                    let w = rng.range_usize(MIN_EXTENT, max_extent + 1);
                    // aspect capped at 2:1 either way
                    let h_lo = (w / 2).max(MIN_EXTENT);
                    let h_hi = (w * 2).min(max_extent);
                    let h = rng.range_usize(h_lo, h_hi.max(h_lo) + 1);
                    let x0 = rng.below(image_size - w + 1);
                    let y0 = rng.below(image_size - h + 1);
                    let candidate = BBox::new(
                        x0 as f64,
                        y0 as f64,
                        (x0 + w) as f64,
                        (y0 + h) as f64,
                    );
                    if annotations
                        .iter()
                        .all(|a| iou(&a.bbox, &candidate) <= MAX_OVERLAP_IOU)
                    {
                        placed = Some((x0, y0, w, h));
                        break;
                    }
                }
                let Some((x0, y0, w, h)) = placed else { continue };

                let shape = Shape::from_class(rng.below(3));
                let mut color;
                loop {
                    color = [
                        rng.below(256) as u8,
                        rng.below(256) as u8,
                        rng.below(256) as u8,
                    ];
                    if color_dist(color, bg) >= MIN_COLOR_DIST {
                        break;
                    }
                }
                let (x1, y1) = (x0 + w, y0 + h);
                for py in y0..y1 {
                    for px in x0..x1 {
                        if covers(shape, x0, y0, x1, y1, px, py) {
                            let base = (py * image_size + px) * 3;
                            pixels[base..base + 3].copy_from_slice(&color);
                        }
                    }
                }
                annotations.push(Annotation {
                    bbox: BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64),
                    class_id: shape.class_id(),
                });
            }

            RawImage {
                image: Rgb8Image {
                    width: image_size,
                    height: image_size,
                    pixels,
                },
                annotations,
                source_id: format!("synth-{:05}", idx),
            }
        })
        .collect()
}

/// Generate and normalize into a manifest.
pub fn generate_synthetic(count: usize, image_size: usize, seed: u64) -> DatasetManifest {
    let raw = generate_synthetic_raw(count, image_size, seed);
    DatasetManifest {
        samples: raw
            .into_iter()
            .map(|r| ImageSample {
                pixels: normalize_rgb8(&r.image.pixels, r.image.height, r.image.width, 3),
                annotations: r.annotations,
                source_id: r.source_id,
            })
            .collect(),
        class_names: SYNTHETIC_CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        split: Split::Train,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_bit_identical() {
        let a = generate_synthetic_raw(8, 64, 42);
        let b = generate_synthetic_raw(8, 64, 42);
        assert_eq!(a, b);
        let c = generate_synthetic_raw(8, 64, 43);
        assert_ne!(a, c);
    }

    #[test]
    fn boxes_valid_in_bounds_and_at_least_one_shape() {
        let manifest = generate_synthetic(50, 96, 7);
        manifest.validate().unwrap();
        for s in &manifest.samples {
            assert!(!s.annotations.is_empty());
            assert!(s.annotations.len() <= 3);
            for a in &s.annotations {
                assert!(a.bbox.width() >= 8.0 && a.bbox.height() >= 8.0);
            }
        }
    }

    #[test]
    fn shape_pixels_stay_inside_annotation_box() {
        for raw in generate_synthetic_raw(12, 64, 11) {
            let size = raw.image.width;
            // reconstruct the background as the most common corner color
            let bg = [raw.image.pixels[0], raw.image.pixels[1], raw.image.pixels[2]];
            for py in 0..size {
                for px in 0..size {
                    let base = (py * size + px) * 3;
                    let rgb = [
                        raw.image.pixels[base],
                        raw.image.pixels[base + 1],
                        raw.image.pixels[base + 2],
                    ];
                    if rgb != bg {
                        let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
                        assert!(
                            raw.annotations.iter().any(|a| cx > a.bbox.x_min
                                && cx < a.bbox.x_max
                                && cy > a.bbox.y_min
                                && cy < a.bbox.y_max),
                            "foreground pixel ({},{}) outside every box",
                            px,
                            py
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn one_box_per_shape_no_duplicate_labels() {
        for raw in generate_synthetic_raw(30, 96, 5) {
            for (i, a) in raw.annotations.iter().enumerate() {
                for b in &raw.annotations[i + 1..] {
                    assert!(iou(&a.bbox, &b.bbox) <= MAX_OVERLAP_IOU);
                }
            }
        }
    }

    #[test]
    fn class_histogram_roughly_uniform_over_300_samples() {
        let manifest = generate_synthetic(300, 64, 123);
        let mut counts = [0usize; 3];
        for s in &manifest.samples {
            for a in &s.annotations {
                counts[a.class_id] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        let expect = total as f64 / 3.0;
        for (c, &n) in counts.iter().enumerate() {
            let dev = (n as f64 - expect).abs() / expect;
            assert!(
                dev <= 0.20,
                "class {} count {} deviates {:.1}% from uniform ({} total)",
                c,
                n,
                dev * 100.0,
                total
            );
        }
    }
}
