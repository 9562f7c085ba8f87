//! Implementations of the `train`, `eval`, `detect`, `gen-data` and
//! `gradcheck` commands.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::data::imageio::{read_image, write_png, Rgb8Image};
use crate::data::{
    denormalize_to_u8, generate_synthetic, generate_synthetic_raw, load_coco_json,
    normalize_rgb8, resize_shorter_edge, save_coco_entries, Annotation, CocoEntry,
    DatasetManifest, ImageSample, Split,
};
use crate::detector::{Detection, BBox};
use crate::gradcheck::{loss_suite, op_suite};
use crate::metrics::{evaluate, match_detections, EvalOptions, EvalResult, MatchFlag};
use crate::model::{DetectOptions, Model};
use crate::train::TrainState;

use super::checkpoint::Checkpoint;
use super::render::{annotate, pr_curve_svg};
use super::{atomic_write, runtime_err, usage_err, CliError, DatasetMode, RunConfig};

fn verbose() -> bool {
    std::env::var("DTN_VERBOSE").map_or(true, |v| v != "0")
}

fn log(msg: std::fmt::Arguments<'_>) {
    if verbose() {
        eprintln!("{}", msg);
    }
}

macro_rules! vlog {
    ($($arg:tt)*) => { log(format_args!($($arg)*)) };
}

/// Resize every sample to the configured shorter edge and require the
/// result to match the model's square input exactly.
fn prepare_manifest(
    manifest: DatasetManifest,
    cfg: &RunConfig,
) -> Result<DatasetManifest, CliError> {
    let target = cfg.dataset.resize_target;
    let size = cfg.patch.image_size;
    let mut out = manifest.clone();
    out.samples = manifest
        .samples
        .into_iter()
        .map(|s| {
            let r = resize_shorter_edge(&s, target);
            if r.height() != size || r.width() != size {
                return Err(usage_err(format!(
                    "image {}: resized to {}x{} but the model needs exactly {}x{} \
                     (H={}, W={}, P={}, m={}); non-square inputs cannot satisfy the patch grid",
                    r.source_id,
                    r.height(),
                    r.width(),
                    size,
                    size,
                    r.height(),
                    r.width(),
                    cfg.patch.patch_size,
                    cfg.patch.overlap,
                )));
            }
            Ok(r)
        })
        .collect::<Result<_, _>>()?;
    out.validate().map_err(usage_err)?;
    Ok(out)
}

fn load_train_dataset(cfg: &RunConfig) -> Result<DatasetManifest, CliError> {
    let manifest = match cfg.dataset.mode {
        DatasetMode::Synthetic => generate_synthetic(
            cfg.dataset.synth_count,
            cfg.dataset.synth_image_size,
            cfg.dataset.synth_seed,
        ),
        DatasetMode::Coco => {
            let load = load_coco_json(
                Path::new(&cfg.dataset.train_annotations),
                Path::new(&cfg.dataset.train_images),
                Split::Train,
            )
            .map_err(|e| usage_err(format!("train dataset: {}", e)))?;
            if load.dropped_boxes > 0 {
                vlog!("warning: dropped {} zero-area boxes", load.dropped_boxes);
            }
            load.manifest
        }
    };
    if manifest.num_classes() != cfg.roi.num_classes {
        return Err(usage_err(format!(
            "dataset has {} classes but roi.num_classes = {}",
            manifest.num_classes(),
            cfg.roi.num_classes
        )));
    }
    prepare_manifest(manifest, cfg)
}

// ── train ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Default)]
pub struct TrainFlags {
    pub config: PathBuf,
    pub iters_phase1: Option<usize>,
    pub iters_phase2: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

pub fn cmd_train(flags: &TrainFlags) -> Result<(), CliError> {
    let resume = flags
        .resume
        .as_ref()
        .map(|p| Checkpoint::load(p).map_err(|e| runtime_err(e.to_string())))
        .transpose()?;

    let cfg = match &resume {
        // a resumed run continues under its own recorded configuration
        Some(ckpt) => {
            if flags.iters_phase1.is_some() || flags.iters_phase2.is_some() || flags.seed.is_some()
            {
                return Err(usage_err(
                    "--resume continues the checkpointed run; it cannot be combined with \
                     --iters-phase1/--iters-phase2/--seed overrides",
                ));
            }
            ckpt.config.clone()
        }
        None => {
            let mut cfg = RunConfig::load(&flags.config)?;
            if let Some(v) = flags.iters_phase1 {
                cfg.train.phase1_iters = v;
            }
            if let Some(v) = flags.iters_phase2 {
                cfg.train.phase2_iters = v;
            }
            if let Some(v) = flags.seed {
                cfg.train.seed = v;
            }
            cfg
        }
    };
    cfg.validate().map_err(usage_err)?;

    let out_dir = flags.out.clone().unwrap_or_else(|| cfg.output_dir());
    fs::create_dir_all(&out_dir)
        .map_err(|e| usage_err(format!("cannot create {}: {}", out_dir.display(), e)))?;

    let data = load_train_dataset(&cfg)?;
    vlog!(
        "training on {} images, {} classes, model grid {}x{}",
        data.samples.len(),
        data.num_classes(),
        cfg.model_config().grid(),
        cfg.model_config().grid()
    );

    let mut model = Model::init(cfg.model_config(), cfg.train.seed);
    let mut state = TrainState::new(&model, cfg.schedule(), cfg.adam());
    if let Some(ckpt) = &resume {
        ckpt.restore(&mut model, &mut state)
            .map_err(|e| runtime_err(e.to_string()))?;
        vlog!("resumed from iteration {}", state.iteration);
    }

    let csv_path = out_dir.join("loss.csv");
    let fresh_csv = resume.is_none() || !csv_path.exists();
    let mut csv = fs::OpenOptions::new()
        .create(true)
        .append(!fresh_csv)
        .write(true)
        .truncate(fresh_csv)
        .open(&csv_path)
        .map_err(|e| usage_err(format!("cannot open {}: {}", csv_path.display(), e)))?;
    if fresh_csv {
        writeln!(csv, "iteration,phase,total_loss,cls_loss,reg_loss")
            .map_err(|e| runtime_err(e.to_string()))?;
    }

    let total = state.schedule.total_iters();
    let phase1_end = state.schedule.phase1_iters;
    while !state.is_done() {
        let rec = state
            .step(&mut model, &data)
            .map_err(|e| runtime_err(e.to_string()))?;
        writeln!(
            csv,
            "{},{},{},{},{}",
            rec.iteration, rec.phase, rec.total, rec.cls, rec.reg
        )
        .map_err(|e| runtime_err(e.to_string()))?;

        let done = rec.iteration + 1;
        if done % 100 == 0 || done == total {
            vlog!(
                "iter {:>6}/{} phase {} loss {:.4} (cls {:.4}, reg {:.4})",
                done,
                total,
                rec.phase,
                rec.total,
                rec.cls,
                rec.reg
            );
        }
        let cadence = cfg.train.checkpoint_every;
        if cadence > 0 && done % cadence == 0 && done != total {
            let path = out_dir.join(format!("ckpt_{:06}.ckpt", done));
            Checkpoint::capture(&cfg, &model, &state)
                .save(&path)
                .map_err(|e| runtime_err(e.to_string()))?;
        }
        if done == phase1_end && phase1_end > 0 {
            let path = out_dir.join("phase1_final.ckpt");
            Checkpoint::capture(&cfg, &model, &state)
                .save(&path)
                .map_err(|e| runtime_err(e.to_string()))?;
        }
    }
    csv.flush().map_err(|e| runtime_err(e.to_string()))?;

    let final_path = out_dir.join("final.ckpt");
    Checkpoint::capture(&cfg, &model, &state)
        .save(&final_path)
        .map_err(|e| runtime_err(e.to_string()))?;
    vlog!("wrote {}", final_path.display());
    Ok(())
}

// ── eval ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Default)]
pub struct EvalFlags {
    pub checkpoint: PathBuf,
    pub annotations: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub plot: Option<PathBuf>,
    pub dump_images: Option<PathBuf>,
    pub score_threshold: f64,
}

fn load_eval_dataset(cfg: &RunConfig, flags: &EvalFlags) -> Result<DatasetManifest, CliError> {
    let manifest = if let Some(ann) = &flags.annotations {
        let images = flags
            .images
            .clone()
            .ok_or_else(|| usage_err("--annotations requires --images"))?;
        load_coco_json(ann, &images, Split::Val)
            .map_err(|e| usage_err(format!("eval dataset: {}", e)))?
            .manifest
    } else if !cfg.dataset.val_annotations.is_empty() {
        load_coco_json(
            Path::new(&cfg.dataset.val_annotations),
            Path::new(&cfg.dataset.val_images),
            Split::Val,
        )
        .map_err(|e| usage_err(format!("eval dataset: {}", e)))?
        .manifest
    } else if cfg.dataset.mode == DatasetMode::Coco {
        load_coco_json(
            Path::new(&cfg.dataset.train_annotations),
            Path::new(&cfg.dataset.train_images),
            Split::Val,
        )
        .map_err(|e| usage_err(format!("eval dataset: {}", e)))?
        .manifest
    } else {
        generate_synthetic(
            cfg.dataset.synth_count,
            cfg.dataset.synth_image_size,
            cfg.dataset.synth_seed,
        )
    };
    prepare_manifest(manifest, cfg)
}

/// Run detection over a manifest; detections stay at the evaluated scale.
pub fn detect_manifest(
    model: &Model,
    manifest: &DatasetManifest,
    opts: &DetectOptions,
) -> BTreeMap<String, Vec<Detection>> {
    manifest
        .samples
        .iter()
        .map(|s| (s.source_id.clone(), model.detect(s, opts)))
        .collect()
}

/// Ranked precision-recall points for one class at one IoU threshold,
/// matching the evaluator's ranking rules.
fn pr_points(
    dets_by_image: &BTreeMap<String, Vec<Detection>>,
    manifest: &DatasetManifest,
    class: usize,
    iou_thresh: f64,
) -> Vec<(f64, f64)> {
    let mut records: Vec<(f64, usize, usize, bool)> = Vec::new();
    let mut n_gt = 0usize;
    for (img_idx, s) in manifest.samples.iter().enumerate() {
        let gts: Vec<BBox> = s
            .annotations
            .iter()
            .filter(|a| a.class_id == class)
            .map(|a| a.bbox)
            .collect();
        n_gt += gts.len();
        let empty = Vec::new();
        let dets = dets_by_image.get(&s.source_id).unwrap_or(&empty);
        let mut class_dets: Vec<&Detection> = dets.iter().filter(|d| d.class_id == class).collect();
        class_dets.sort_by(|a, b| b.score.partial_cmp(&a.score).expect("finite scores"));
        let flags = match_detections(&class_dets, &gts, &vec![false; gts.len()], iou_thresh);
        for (di, (d, f)) in class_dets.iter().zip(&flags).enumerate() {
            records.push((d.score, img_idx, di, matches!(f, MatchFlag::Tp(_))));
        }
    }
    if n_gt == 0 {
        return Vec::new();
    }
    records.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .expect("finite scores")
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut tp = 0usize;
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            if r.3 {
                tp += 1;
            }
            (tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64)
        })
        .collect()
}

pub fn cmd_eval(flags: &EvalFlags) -> Result<EvalResult, CliError> {
    let ckpt = Checkpoint::load(&flags.checkpoint).map_err(|e| runtime_err(e.to_string()))?;
    let cfg = ckpt.config.clone();
    cfg.validate().map_err(runtime_err)?;
    let mut model = Model::init(cfg.model_config(), cfg.train.seed);
    ckpt.restore_params(&mut model)
        .map_err(|e| runtime_err(e.to_string()))?;

    let manifest = load_eval_dataset(&cfg, flags)?;
    let opts = DetectOptions {
        score_threshold: flags.score_threshold,
        nms_iou: cfg.detect.nms_iou,
        max_detections: cfg.detect.max_detections,
    };
    vlog!(
        "evaluating {} images at score threshold {}",
        manifest.samples.len(),
        opts.score_threshold
    );
    let dets = detect_manifest(&model, &manifest, &opts);
    let result = evaluate(&dets, &manifest, &EvalOptions::default())
        .map_err(|e| runtime_err(e.to_string()))?;

    let json = format!(
        "{}\n",
        serde_json::to_string_pretty(&result).expect("serializable result")
    );
    print!("{}", json);
    if let Some(out) = &flags.out {
        atomic_write(out, json.as_bytes())
            .map_err(|e| runtime_err(format!("cannot write {}: {}", out.display(), e)))?;
    }

    if let Some(plot) = &flags.plot {
        let curves: Vec<(String, Vec<(f64, f64)>)> = (0..manifest.num_classes())
            .map(|c| {
                (
                    manifest.class_names[c].clone(),
                    pr_points(&dets, &manifest, c, 0.5),
                )
            })
            .collect();
        atomic_write(plot, pr_curve_svg(&curves).as_bytes())
            .map_err(|e| runtime_err(format!("cannot write {}: {}", plot.display(), e)))?;
    }

    if let Some(dir) = &flags.dump_images {
        fs::create_dir_all(dir)
            .map_err(|e| runtime_err(format!("cannot create {}: {}", dir.display(), e)))?;
        for s in &manifest.samples {
            let rgb = sample_to_rgb(s);
            let empty = Vec::new();
            let annotated = annotate(&rgb, dets.get(&s.source_id).unwrap_or(&empty));
            let stem = s.source_id.replace(['/', '\\'], "_");
            let stem = stem.strip_suffix(".png").unwrap_or(&stem);
            let name = format!("{}.png", stem);
            write_png(&dir.join(name), &annotated).map_err(|e| runtime_err(e.to_string()))?;
        }
    }
    Ok(result)
}

fn sample_to_rgb(sample: &ImageSample) -> Rgb8Image {
    Rgb8Image {
        width: sample.width(),
        height: sample.height(),
        pixels: sample.pixels.data().iter().map(|&v| denormalize_to_u8(v)).collect(),
    }
}

// ── detect ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Default)]
pub struct DetectFlags {
    pub checkpoint: PathBuf,
    pub image: PathBuf,
    pub score_threshold: Option<f64>,
    pub out_json: Option<PathBuf>,
    pub out_image: Option<PathBuf>,
}

pub fn cmd_detect(flags: &DetectFlags) -> Result<Vec<Detection>, CliError> {
    let ckpt = Checkpoint::load(&flags.checkpoint).map_err(|e| runtime_err(e.to_string()))?;
    let cfg = ckpt.config.clone();
    cfg.validate().map_err(runtime_err)?;
    let mut model = Model::init(cfg.model_config(), cfg.train.seed);
    ckpt.restore_params(&mut model)
        .map_err(|e| runtime_err(e.to_string()))?;

    let rgb = read_image(&flags.image).map_err(|e| usage_err(e.to_string()))?;
    let (orig_w, orig_h) = (rgb.width, rgb.height);
    let sample = ImageSample {
        pixels: normalize_rgb8(&rgb.pixels, rgb.height, rgb.width, 3),
        annotations: Vec::new(),
        source_id: flags.image.display().to_string(),
    };
    let resized = resize_shorter_edge(&sample, cfg.dataset.resize_target);
    let size = cfg.patch.image_size;
    if resized.height() != size || resized.width() != size {
        return Err(usage_err(format!(
            "image {}: resized to H={} W={} but the patch grid needs H=W={} with P={}, m={}",
            flags.image.display(),
            resized.height(),
            resized.width(),
            size,
            cfg.patch.patch_size,
            cfg.patch.overlap,
        )));
    }

    let mut opts = cfg.detect_options();
    if let Some(t) = flags.score_threshold {
        opts.score_threshold = t;
    }
    let dets_model_scale = model.detect(&resized, &opts);

    // map back to original pixel coordinates
    let factor_back = orig_w.min(orig_h) as f64 / cfg.dataset.resize_target as f64;
    let detections: Vec<Detection> = dets_model_scale
        .into_iter()
        .filter_map(|d| {
            d.bbox
                .scaled(factor_back)
                .clip(orig_w as f64, orig_h as f64)
                .map(|bbox| Detection { bbox, ..d })
        })
        .collect();

    let mut jsonl = String::new();
    for d in &detections {
        jsonl.push_str(&serde_json::to_string(d).expect("serializable detection"));
        jsonl.push('\n');
    }
    print!("{}", jsonl);
    if let Some(out) = &flags.out_json {
        atomic_write(out, jsonl.as_bytes())
            .map_err(|e| runtime_err(format!("cannot write {}: {}", out.display(), e)))?;
    }
    if let Some(out) = &flags.out_image {
        let annotated = annotate(&rgb, &detections);
        write_png(out, &annotated).map_err(|e| runtime_err(e.to_string()))?;
    }
    Ok(detections)
}

// ── gen-data ─────────────────────────────────────────────────────────

pub fn cmd_gen_data(
    out_dir: &Path,
    count: usize,
    image_size: usize,
    seed: u64,
) -> Result<(), CliError> {
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir)
        .map_err(|e| usage_err(format!("cannot create {}: {}", images_dir.display(), e)))?;
    let raws = generate_synthetic_raw(count, image_size, seed);
    let mut entries = Vec::with_capacity(raws.len());
    let mut n_boxes = 0usize;
    for raw in &raws {
        let file_name = format!("{}.png", raw.source_id);
        write_png(&images_dir.join(&file_name), &raw.image)
            .map_err(|e| runtime_err(e.to_string()))?;
        n_boxes += raw.annotations.len();
        entries.push(CocoEntry {
            file_name,
            width: raw.image.width,
            height: raw.image.height,
            annotations: raw.annotations.clone(),
        });
    }
    let class_names: Vec<String> = crate::data::SYNTHETIC_CLASS_NAMES
        .iter()
        .map(|s| s.to_string())
        .collect();
    save_coco_entries(&out_dir.join("annotations.json"), &entries, &class_names)
        .map_err(|e| runtime_err(e.to_string()))?;
    vlog!(
        "wrote {} images ({} boxes) to {}",
        raws.len(),
        n_boxes,
        out_dir.display()
    );
    Ok(())
}

// ── gradcheck ────────────────────────────────────────────────────────

pub fn cmd_gradcheck(instances: usize, loss_instances: usize) -> Result<(), CliError> {
    let mut all_ok = true;
    let mut reports = op_suite(2024, instances);
    reports.extend(loss_suite(7, loss_instances));
    for r in &reports {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        println!(
            "gradcheck {:<28} {}  max rel err {:.3e} over {} coords ({} instances, tol {:.0e})",
            r.name, status, r.max_rel_err, r.coords_checked, r.instances, r.tolerance
        );
        all_ok &= r.passed();
    }
    if all_ok {
        Ok(())
    } else {
        Err(runtime_err("gradient check failed"))
    }
}

/// Shared helper for tests and the eval path: build the dataset exactly as
/// `cmd_train` would.
pub fn dataset_for_config(cfg: &RunConfig) -> Result<DatasetManifest, CliError> {
    load_train_dataset(cfg)
}

/// Ground-truth detections for a manifest (perfect-detector fixture).
pub fn perfect_detections(manifest: &DatasetManifest) -> BTreeMap<String, Vec<Detection>> {
    manifest
        .samples
        .iter()
        .map(|s| {
            (
                s.source_id.clone(),
                s.annotations
                    .iter()
                    .map(|a: &Annotation| Detection {
                        bbox: a.bbox,
                        class_id: a.class_id,
                        score: 1.0,
                    })
                    .collect(),
            )
        })
        .collect()
}
