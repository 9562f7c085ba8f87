//! Python bindings: detection geometry, the AP evaluator, patch plumbing,
//! the synthetic dataset generator, and checkpoint-driven inference.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use dettransnet::backbone::PatchConfig;
use dettransnet::cli::checkpoint::Checkpoint;
use dettransnet::cli::commands::cmd_gen_data;
use dettransnet::cli::RunConfig;
use dettransnet::data::imageio::read_image;
use dettransnet::data::{load_coco_json, normalize_rgb8, resize_shorter_edge, ImageSample, Split};
use dettransnet::detector::{self, BBox, Detection};
use dettransnet::metrics::{self, EvalOptions};
use dettransnet::model::{desk_config, DetectOptions, Model as CoreModel};
use dettransnet::tensor::Tensor;

type Box4 = (f64, f64, f64, f64);

fn to_bbox(b: Box4) -> PyResult<BBox> {
    BBox::try_new(b.0, b.1, b.2, b.3).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Intersection-over-union of two (x_min, y_min, x_max, y_max) boxes.
#[pyfunction]
fn iou(a: Box4, b: Box4) -> PyResult<f64> {
    Ok(detector::iou(&to_bbox(a)?, &to_bbox(b)?))
}

/// Greedy NMS; returns surviving input indices ordered by descending score.
#[pyfunction]
fn nms(boxes: Vec<Box4>, scores: Vec<f64>, iou_threshold: f64) -> PyResult<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(PyValueError::new_err(format!(
            "{} boxes vs {} scores",
            boxes.len(),
            scores.len()
        )));
    }
    let bs: Vec<BBox> = boxes.into_iter().map(to_bbox).collect::<PyResult<_>>()?;
    Ok(detector::nms_indices(&bs, &scores, iou_threshold))
}

/// Box regression targets (tx, ty, tw, th) of `gt` relative to `anchor`.
#[pyfunction]
fn encode_box(anchor: Box4, gt: Box4) -> PyResult<(f64, f64, f64, f64)> {
    let t = detector::encode_box(&to_bbox(anchor)?, &to_bbox(gt)?);
    Ok((t[0], t[1], t[2], t[3]))
}

/// Inverse of `encode_box`, clipped to the image; `None` if degenerate.
#[pyfunction]
fn decode_box(
    anchor: Box4,
    deltas: (f64, f64, f64, f64),
    image_w: f64,
    image_h: f64,
) -> PyResult<Option<Box4>> {
    let out = detector::decode_box(
        &to_bbox(anchor)?,
        [deltas.0, deltas.1, deltas.2, deltas.3],
        image_w,
        image_h,
    );
    Ok(out.map(|b| (b.x_min, b.y_min, b.x_max, b.y_max)))
}

/// Patch-grid arithmetic for a square image: (stride, patches_per_side, n).
/// Raises ValueError when the configuration does not tile the image.
#[pyfunction]
fn patch_grid(image_size: usize, patch_size: usize, overlap: usize) -> PyResult<(usize, usize, usize)> {
    let cfg = PatchConfig::square(image_size, 1, patch_size, overlap);
    cfg.validate().map_err(PyValueError::new_err)?;
    Ok((cfg.stride(), cfg.patches_per_side(), cfg.num_patches()))
}

/// Flatten a square image (row-major h*w*c floats) into overlapping
/// patches. Returns (n, patch_len, data).
#[pyfunction]
fn extract_patches(
    image: Vec<f32>,
    image_size: usize,
    channels: usize,
    patch_size: usize,
    overlap: usize,
) -> PyResult<(usize, usize, Vec<f32>)> {
    let cfg = PatchConfig::square(image_size, channels, patch_size, overlap);
    cfg.validate().map_err(PyValueError::new_err)?;
    if image.len() != image_size * image_size * channels {
        return Err(PyValueError::new_err(format!(
            "image has {} values, expected {}",
            image.len(),
            image_size * image_size * channels
        )));
    }
    let t = Tensor::from_vec(vec![image_size, image_size, channels], image);
    let patches = dettransnet::backbone::extract_patches(&t, &cfg);
    let (n, len) = (patches.shape()[0], patches.shape()[1]);
    Ok((n, len, patches.into_data()))
}

/// 101-point interpolated average precision of a ranked TP/FP sequence;
/// `None` when there is no ground truth.
#[pyfunction]
fn average_precision(ranked_tp: Vec<bool>, n_gt: usize) -> PyResult<Option<f64>> {
    Ok(metrics::average_precision(&ranked_tp, n_gt))
}

/// Write a synthetic-shapes dataset (PNGs + COCO-style annotations.json).
#[pyfunction]
#[pyo3(signature = (out_dir, count=32, image_size=96, seed=42))]
fn generate_synthetic(out_dir: PathBuf, count: usize, image_size: usize, seed: u64) -> PyResult<()> {
    cmd_gen_data(&out_dir, count, image_size, seed).map_err(|e| PyIOError::new_err(e.to_string()))
}

fn detection_to_dict<'py>(py: Python<'py>, d: &Detection) -> PyResult<Bound<'py, PyDict>> {
    let dict = PyDict::new(py);
    dict.set_item("bbox", (d.bbox.x_min, d.bbox.y_min, d.bbox.x_max, d.bbox.y_max))?;
    dict.set_item("class_id", d.class_id)?;
    dict.set_item("score", d.score)?;
    Ok(dict)
}

/// The detector: backbone, RPN and ROI head behind a small inference API.
#[pyclass]
struct Model {
    model: CoreModel,
    config: RunConfig,
}

#[pymethods]
impl Model {
    /// Fresh random weights from the built-in desk-scale profile.
    #[staticmethod]
    #[pyo3(signature = (seed=42))]
    fn desk(seed: u64) -> PyResult<Model> {
        let mut config = RunConfig::default();
        config.train.seed = seed;
        Ok(Model {
            model: CoreModel::init(desk_config(), seed),
            config,
        })
    }

    /// Fresh random weights from a TOML run configuration.
    #[staticmethod]
    #[pyo3(signature = (toml_text, seed=None))]
    fn from_config_toml(toml_text: &str, seed: Option<u64>) -> PyResult<Model> {
        let mut config = RunConfig::parse(toml_text).map_err(PyValueError::new_err)?;
        if let Some(s) = seed {
            config.train.seed = s;
        }
        Ok(Model {
            model: CoreModel::init(config.model_config(), config.train.seed),
            config,
        })
    }

    /// Load weights and configuration from a training checkpoint.
    #[staticmethod]
    fn from_checkpoint(path: PathBuf) -> PyResult<Model> {
        let ckpt = Checkpoint::load(&path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        let config = ckpt.config.clone();
        config.validate().map_err(PyValueError::new_err)?;
        let mut model = CoreModel::init(config.model_config(), config.train.seed);
        ckpt.restore_params(&mut model)
            .map_err(|e| PyIOError::new_err(e.to_string()))?;
        Ok(Model { model, config })
    }

    /// (grid, tokens, embed_dim): feature-map side, n+1 and D.
    #[getter]
    fn shape_summary(&self) -> (usize, usize, usize) {
        (
            self.model.cfg.grid(),
            self.model.cfg.patch.num_patches() + 1,
            self.model.cfg.encoder.embed_dim,
        )
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.model.cfg.roi.num_classes
    }

    /// Detect objects in an image file (PNG or PPM). Boxes come back in
    /// original-image pixel coordinates, sorted by descending score.
    #[pyo3(signature = (image_path, score_threshold=None))]
    fn detect<'py>(
        &self,
        py: Python<'py>,
        image_path: PathBuf,
        score_threshold: Option<f64>,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let rgb = read_image(&image_path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        let (orig_w, orig_h) = (rgb.width, rgb.height);
        let sample = ImageSample {
            pixels: normalize_rgb8(&rgb.pixels, rgb.height, rgb.width, 3),
            annotations: Vec::new(),
            source_id: image_path.display().to_string(),
        };
        let resized = resize_shorter_edge(&sample, self.config.dataset.resize_target);
        let size = self.model.cfg.patch.height;
        if resized.height() != size || resized.width() != size {
            return Err(PyValueError::new_err(format!(
                "image resized to {}x{}, model needs {}x{} (P={}, m={})",
                resized.height(),
                resized.width(),
                size,
                size,
                self.model.cfg.patch.patch_size,
                self.model.cfg.patch.overlap,
            )));
        }
        let mut opts: DetectOptions = self.config.detect_options();
        if let Some(t) = score_threshold {
            opts.score_threshold = t;
        }
        let factor_back = orig_w.min(orig_h) as f64 / self.config.dataset.resize_target as f64;
        self.model
            .detect(&resized, &opts)
            .into_iter()
            .filter_map(|d| {
                d.bbox
                    .scaled(factor_back)
                    .clip(orig_w as f64, orig_h as f64)
                    .map(|bbox| Detection { bbox, ..d })
            })
            .map(|d| detection_to_dict(py, &d))
            .collect()
    }

    /// COCO-style evaluation over a dataset directory; returns the metrics
    /// as a dict (ap, ap50, ap_small, ap_medium, ap_large, per_class).
    #[pyo3(signature = (annotations, images, score_threshold=0.05))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        annotations: PathBuf,
        images: PathBuf,
        score_threshold: f64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let load = load_coco_json(&annotations, &images, Split::Val)
            .map_err(|e| PyIOError::new_err(e.to_string()))?;
        let target = self.config.dataset.resize_target;
        let size = self.model.cfg.patch.height;
        let mut samples = Vec::new();
        for s in &load.manifest.samples {
            let r = resize_shorter_edge(s, target);
            if r.height() != size || r.width() != size {
                return Err(PyValueError::new_err(format!(
                    "image {} resized to {}x{}, model needs {}x{}",
                    r.source_id,
                    r.height(),
                    r.width(),
                    size,
                    size
                )));
            }
            samples.push(r);
        }
        let mut manifest = load.manifest;
        manifest.samples = samples;

        let opts = DetectOptions {
            score_threshold,
            nms_iou: self.config.detect.nms_iou,
            max_detections: self.config.detect.max_detections,
        };
        let dets: BTreeMap<String, Vec<Detection>> = manifest
            .samples
            .iter()
            .map(|s| (s.source_id.clone(), self.model.detect(s, &opts)))
            .collect();
        let result = metrics::evaluate(&dets, &manifest, &EvalOptions::default())
            .map_err(|e| PyValueError::new_err(e.to_string()))?;

        let out = PyDict::new(py);
        out.set_item("ap", result.ap)?;
        out.set_item("ap50", result.ap50)?;
        out.set_item("ap_small", result.ap_small)?;
        out.set_item("ap_medium", result.ap_medium)?;
        out.set_item("ap_large", result.ap_large)?;
        let per_class = PyDict::new(py);
        for pc in &result.per_class {
            per_class.set_item(pc.name.clone(), pc.ap)?;
        }
        out.set_item("per_class", per_class)?;
        out.set_item("num_images", result.num_images)?;
        out.set_item("num_detections", result.num_detections)?;
        Ok(out)
    }
}

/// Load the committed desk profile from a path (convenience for scripts).
#[pyfunction]
fn load_config_toml(path: PathBuf) -> PyResult<String> {
    let text = std::fs::read_to_string(&path)
        .map_err(|e| PyIOError::new_err(format!("{}: {}", path.display(), e)))?;
    RunConfig::parse(&text).map_err(PyValueError::new_err)?;
    Ok(text)
}

#[pymodule]
fn dettransnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(nms, m)?)?;
    m.add_function(wrap_pyfunction!(encode_box, m)?)?;
    m.add_function(wrap_pyfunction!(decode_box, m)?)?;
    m.add_function(wrap_pyfunction!(patch_grid, m)?)?;
    m.add_function(wrap_pyfunction!(extract_patches, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(load_config_toml, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
