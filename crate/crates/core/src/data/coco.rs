//! COCO-format annotation subset.
//!
//! Recognized structure (all other keys ignored):
//! `images[{id, file_name, width, height}]`,
//! `annotations[{id, image_id, category_id, bbox: [x, y, w, h]}]`,
//! `categories[{id, name}]`.
//!
//! Category ids are remapped to dense `[0, K)` in ascending original id.
//! Boxes are converted from `[x, y, w, h]` to corner form; zero-area boxes
//! are dropped and counted.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::BBox;

use super::imageio::read_image;
use super::{normalize_rgb8, Annotation, DataError, DatasetManifest, ImageSample, Split};

#[derive(Debug, Serialize, Deserialize)]
struct CocoImage {
    id: i64,
    file_name: String,
    width: usize,
    height: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: i64,
    category_id: i64,
    bbox: [f64; 4],
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoCategory {
    id: i64,
    name: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoDoc {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

/// A loaded dataset plus the count of annotations that were dropped for
/// having no area (after clamping to image bounds).
#[derive(Debug)]
pub struct CocoLoad {
    pub manifest: DatasetManifest,
    pub dropped_boxes: usize,
}

pub fn load_coco_json(
    annotation_path: &Path,
    image_dir: &Path,
    split: Split,
) -> Result<CocoLoad, DataError> {
    let text = fs::read_to_string(annotation_path).map_err(|e| DataError::Io {
        path: annotation_path.display().to_string(),
        source: e,
    })?;
    let doc: CocoDoc = serde_json::from_str(&text).map_err(|e| DataError::Malformed {
        path: annotation_path.display().to_string(),
        message: e.to_string(),
    })?;

    // dense category remap in ascending original id
    let mut cats: Vec<(i64, String)> = doc.categories.iter().map(|c| (c.id, c.name.clone())).collect();
    cats.sort_by_key(|c| c.0);
    let cat_map: BTreeMap<i64, usize> = cats.iter().enumerate().map(|(i, c)| (c.0, i)).collect();
    let class_names: Vec<String> = cats.into_iter().map(|c| c.1).collect();

    let image_index: BTreeMap<i64, usize> = doc
        .images
        .iter()
        .enumerate()
        .map(|(i, im)| (im.id, i))
        .collect();

    let mut per_image_annotations: Vec<Vec<Annotation>> = vec![Vec::new(); doc.images.len()];
    let mut dropped = 0usize;
    for ann in &doc.annotations {
        let &img_idx = image_index.get(&ann.image_id).ok_or(DataError::UnknownImage {
            annotation_id: ann.id,
            image_id: ann.image_id,
        })?;
        let &class_id = cat_map.get(&ann.category_id).ok_or(DataError::UnknownCategory {
            annotation_id: ann.id,
            category_id: ann.category_id,
        })?;
        let [x, y, w, h] = ann.bbox;
        let img = &doc.images[img_idx];
        let clamped = BBox::try_new(x, y, x + w, y + h)
            .ok()
            .and_then(|b| b.clip(img.width as f64, img.height as f64));
        match clamped {
            Some(bbox) => per_image_annotations[img_idx].push(Annotation { bbox, class_id }),
            None => dropped += 1,
        }
    }

    let mut samples = Vec::with_capacity(doc.images.len());
    for (idx, im) in doc.images.iter().enumerate() {
        let path = image_dir.join(&im.file_name);
        let rgb = read_image(&path)?;
        if rgb.width != im.width || rgb.height != im.height {
            return Err(DataError::Malformed {
                path: annotation_path.display().to_string(),
                message: format!(
                    "image {} is {}x{} on disk but {}x{} in the annotation file",
                    im.file_name, rgb.width, rgb.height, im.width, im.height
                ),
            });
        }
        samples.push(ImageSample {
            pixels: normalize_rgb8(&rgb.pixels, rgb.height, rgb.width, 3),
            annotations: std::mem::take(&mut per_image_annotations[idx]),
            source_id: im.file_name.clone(),
        });
    }

    Ok(CocoLoad {
        manifest: DatasetManifest {
            samples,
            class_names,
            split,
        },
        dropped_boxes: dropped,
    })
}

/// One image entry for [`save_coco_entries`].
#[derive(Debug, Clone)]
pub struct CocoEntry {
    pub file_name: String,
    pub width: usize,
    pub height: usize,
    pub annotations: Vec<Annotation>,
}

/// Write the annotation subset. Image ids are 1-based positions, category
/// ids are `class_id + 1`, boxes go back to `[x, y, w, h]`.
pub fn save_coco_entries(
    path: &Path,
    entries: &[CocoEntry],
    class_names: &[String],
) -> Result<(), DataError> {
    let images: Vec<CocoImage> = entries
        .iter()
        .enumerate()
        .map(|(i, e)| CocoImage {
            id: i as i64 + 1,
            file_name: e.file_name.clone(),
            width: e.width,
            height: e.height,
        })
        .collect();
    let mut annotations = Vec::new();
    let mut next_id = 1u64;
    for (i, e) in entries.iter().enumerate() {
        for a in &e.annotations {
            annotations.push(CocoAnnotation {
                id: next_id,
                image_id: i as i64 + 1,
                category_id: a.class_id as i64 + 1,
                bbox: [
                    a.bbox.x_min,
                    a.bbox.y_min,
                    a.bbox.width(),
                    a.bbox.height(),
                ],
            });
            next_id += 1;
        }
    }
    let categories: Vec<CocoCategory> = class_names
        .iter()
        .enumerate()
        .map(|(i, n)| CocoCategory {
            id: i as i64 + 1,
            name: n.clone(),
        })
        .collect();
    let doc = CocoDoc {
        images,
        annotations,
        categories,
    };
    let json = serde_json::to_string_pretty(&doc).expect("serializable document");
    fs::write(path, json).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Serialize a manifest back to the annotation subset, using each sample's
/// `source_id` as its file name.
pub fn save_coco_json(manifest: &DatasetManifest, path: &Path) -> Result<(), DataError> {
    let entries: Vec<CocoEntry> = manifest
        .samples
        .iter()
        .map(|s| CocoEntry {
            file_name: s.source_id.clone(),
            width: s.width(),
            height: s.height(),
            annotations: s.annotations.clone(),
        })
        .collect();
    save_coco_entries(path, &entries, &manifest.class_names)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::imageio::{write_png, Rgb8Image};

    fn temp_dir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("dtn_coco_{}", tag));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn flat_png(dir: &Path, name: &str, w: usize, h: usize, v: u8) {
        write_png(
            &dir.join(name),
            &Rgb8Image {
                width: w,
                height: h,
                pixels: vec![v; w * h * 3],
            },
        )
        .unwrap();
    }

    fn write_fixture(dir: &Path) -> std::path::PathBuf {
        // 3 images, hand-authored boxes; category ids deliberately sparse
        flat_png(dir, "a.png", 32, 24, 10);
        flat_png(dir, "b.png", 16, 16, 20);
        flat_png(dir, "c.png", 20, 20, 30);
        let json = r#"{
            "info": {"ignored": true},
            "images": [
                {"id": 7, "file_name": "a.png", "width": 32, "height": 24, "license": 1},
                {"id": 9, "file_name": "b.png", "width": 16, "height": 16},
                {"id": 11, "file_name": "c.png", "width": 20, "height": 20}
            ],
            "annotations": [
                {"id": 1, "image_id": 7, "category_id": 5, "bbox": [10, 20, 30, 40], "area": 1200},
                {"id": 2, "image_id": 7, "category_id": 12, "bbox": [2, 2, 8, 8]},
                {"id": 3, "image_id": 9, "category_id": 5, "bbox": [1, 1, 0, 6]},
                {"id": 4, "image_id": 11, "category_id": 12, "bbox": [4, 4, 10, 10]}
            ],
            "categories": [
                {"id": 12, "name": "late"},
                {"id": 5, "name": "early"}
            ]
        }"#;
        let path = dir.join("ann.json");
        fs::write(&path, json).unwrap();
        path
    }

    #[test]
    fn fixture_roundtrips_to_known_boxes_and_classes() {
        let dir = temp_dir("fixture");
        let path = write_fixture(&dir);
        let loaded = load_coco_json(&path, &dir, Split::Val).unwrap();
        let m = &loaded.manifest;

        // dense remap: id 5 -> 0 ("early"), id 12 -> 1 ("late")
        assert_eq!(m.class_names, vec!["early".to_string(), "late".to_string()]);
        assert_eq!(m.samples.len(), 3);
        assert_eq!(m.samples[0].source_id, "a.png");

        // [10,20,30,40] -> corners (10,20,40,60), clamped to the 32x24 image
        let a0 = &m.samples[0].annotations[0];
        assert_eq!(a0.class_id, 0);
        assert_eq!(a0.bbox, BBox::new(10.0, 20.0, 32.0, 24.0));
        let a1 = &m.samples[0].annotations[1];
        assert_eq!(a1.class_id, 1);
        assert_eq!(a1.bbox, BBox::new(2.0, 2.0, 10.0, 10.0));

        // the zero-width box on image b was dropped
        assert_eq!(loaded.dropped_boxes, 1);
        assert!(m.samples[1].annotations.is_empty());

        assert_eq!(m.samples[2].annotations[0].bbox, BBox::new(4.0, 4.0, 14.0, 14.0));
        m.validate().unwrap();
    }

    #[test]
    fn corner_conversion_is_x_plus_w() {
        let dir = temp_dir("conv");
        flat_png(&dir, "i.png", 100, 100, 0);
        let json = r#"{
            "images": [{"id": 1, "file_name": "i.png", "width": 100, "height": 100}],
            "annotations": [{"id": 1, "image_id": 1, "category_id": 1, "bbox": [10, 20, 30, 40]}],
            "categories": [{"id": 1, "name": "x"}]
        }"#;
        let path = dir.join("ann.json");
        fs::write(&path, json).unwrap();
        let m = load_coco_json(&path, &dir, Split::Train).unwrap().manifest;
        assert_eq!(m.samples[0].annotations[0].bbox, BBox::new(10.0, 20.0, 40.0, 60.0));
    }

    #[test]
    fn empty_annotation_list_is_fine() {
        let dir = temp_dir("empty");
        flat_png(&dir, "i.png", 8, 8, 0);
        let json = r#"{
            "images": [{"id": 1, "file_name": "i.png", "width": 8, "height": 8}],
            "annotations": [],
            "categories": [{"id": 1, "name": "x"}]
        }"#;
        let path = dir.join("ann.json");
        fs::write(&path, json).unwrap();
        let m = load_coco_json(&path, &dir, Split::Train).unwrap().manifest;
        assert_eq!(m.samples.len(), 1);
        assert!(m.samples[0].annotations.is_empty());
    }

    #[test]
    fn malformed_json_missing_image_unknown_category_all_error() {
        let dir = temp_dir("errors");
        let path = dir.join("ann.json");

        fs::write(&path, "{ not json").unwrap();
        assert!(matches!(
            load_coco_json(&path, &dir, Split::Train),
            Err(DataError::Malformed { .. })
        ));

        fs::write(
            &path,
            r#"{"images": [{"id":1,"file_name":"missing.png","width":8,"height":8}],
                "annotations": [], "categories": []}"#,
        )
        .unwrap();
        assert!(matches!(
            load_coco_json(&path, &dir, Split::Train),
            Err(DataError::Io { .. })
        ));

        flat_png(&dir, "ok.png", 8, 8, 0);
        fs::write(
            &path,
            r#"{"images": [{"id":1,"file_name":"ok.png","width":8,"height":8}],
                "annotations": [{"id":1,"image_id":1,"category_id":99,"bbox":[1,1,2,2]}],
                "categories": [{"id":1,"name":"x"}]}"#,
        )
        .unwrap();
        assert!(matches!(
            load_coco_json(&path, &dir, Split::Train),
            Err(DataError::UnknownCategory {
                category_id: 99,
                ..
            })
        ));
    }

    #[test]
    fn load_save_load_is_a_fixpoint() {
        let dir = temp_dir("fixpoint");
        let path = write_fixture(&dir);
        let first = load_coco_json(&path, &dir, Split::Val).unwrap().manifest;
        let resaved = dir.join("resaved.json");
        save_coco_json(&first, &resaved).unwrap();
        let second = load_coco_json(&resaved, &dir, Split::Val).unwrap();
        assert_eq!(second.manifest, first);
        assert_eq!(second.dropped_boxes, 0);
    }
}
