//! Run configuration, checkpointing and the command implementations behind
//! the `dettransnet` binary.

pub mod checkpoint;
pub mod commands;
pub mod render;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{EncoderConfig, PatchConfig};
use crate::detector::{AnchorSpec, RpnConfig};
use crate::model::{DetectOptions, ModelConfig, RoiConfig};
use crate::train::{AdamHyper, TrainSchedule};

/// Exit codes: 0 success, 1 usage/config, 2 runtime/numeric failure.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

pub fn usage_err(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub fn runtime_err(msg: impl Into<String>) -> CliError {
    CliError::Runtime(msg.into())
}

// ── run configuration ────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub phase1_iters: usize,
    pub phase2_iters: usize,
    pub batch_size: usize,
    pub rois_per_image: usize,
    pub seed: u64,
    pub warmup_iters: usize,
    pub augment_hflip: bool,
    pub include_gt_rois: bool,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Checkpoint cadence in iterations; 0 saves only phase-end and final.
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let s = TrainSchedule::default();
        let h = AdamHyper::default();
        TrainSection {
            phase1_iters: s.phase1_iters,
            phase2_iters: s.phase2_iters,
            batch_size: s.batch_size,
            rois_per_image: s.rois_per_image,
            seed: s.seed,
            warmup_iters: s.warmup_iters,
            augment_hflip: s.augment_hflip,
            include_gt_rois: s.include_gt_rois,
            lr: h.lr,
            weight_decay: h.weight_decay,
            beta1: h.beta1,
            beta2: h.beta2,
            adam_eps: h.eps,
            checkpoint_every: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetMode {
    Coco,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSection {
    pub mode: DatasetMode,
    /// Shorter-edge resize applied to every loaded image.
    pub resize_target: usize,
    pub train_annotations: String,
    pub train_images: String,
    pub val_annotations: String,
    pub val_images: String,
    /// Synthetic mode: image count, square size and generator seed.
    pub synth_count: usize,
    pub synth_image_size: usize,
    pub synth_seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            mode: DatasetMode::Synthetic,
            resize_target: 96,
            train_annotations: String::new(),
            train_images: String::new(),
            val_annotations: String::new(),
            val_images: String::new(),
            synth_count: 32,
            synth_image_size: 96,
            synth_seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputSection {
    pub dir: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: "runs/desk".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResidualSection {
    pub blocks: usize,
}

impl Default for ResidualSection {
    fn default() -> Self {
        ResidualSection { blocks: 2 }
    }
}

/// Every knob of a run, mirrored onto the TOML config file. Sections map
/// onto the component configurations; command-line flags override file
/// values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub patch: PatchSection,
    pub encoder: EncoderSection,
    pub residual: ResidualSection,
    pub rpn: RpnSection,
    pub roi: RoiSection,
    pub train: TrainSection,
    pub dataset: DatasetSection,
    pub detect: DetectSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchSection {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub overlap: usize,
}

impl Default for PatchSection {
    fn default() -> Self {
        PatchSection {
            image_size: 96,
            channels: 3,
            patch_size: 16,
            overlap: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderSection {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
}

impl Default for EncoderSection {
    fn default() -> Self {
        EncoderSection {
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            dropout: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RpnSection {
    pub kernel_size: usize,
    pub hidden_dim: usize,
    pub nms_iou: f64,
    pub pre_nms_top: usize,
    pub post_nms_top: usize,
    pub anchor_scales: Vec<f64>,
    pub anchor_ratios: Vec<f64>,
}

impl Default for RpnSection {
    fn default() -> Self {
        RpnSection {
            kernel_size: 3,
            hidden_dim: 64,
            nms_iou: 0.7,
            pre_nms_top: 300,
            post_nms_top: 100,
            anchor_scales: vec![8.0, 16.0, 24.0],
            anchor_ratios: vec![1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoiSection {
    pub pool_size: usize,
    pub head_hidden: usize,
    pub num_classes: usize,
}

impl Default for RoiSection {
    fn default() -> Self {
        RoiSection {
            pool_size: 7,
            head_hidden: 256,
            num_classes: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectSection {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for DetectSection {
    fn default() -> Self {
        DetectSection {
            score_threshold: 0.5,
            nms_iou: 0.5,
            max_detections: 100,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage_err(format!("cannot read config {}: {}", path.display(), e)))?;
        RunConfig::parse(&text)
            .map_err(|e| usage_err(format!("config {}: {}", path.display(), e)))
    }

    pub fn parse(text: &str) -> Result<RunConfig, String> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            res_blocks: self.residual.blocks,
            patch: PatchConfig::square(
                self.patch.image_size,
                self.patch.channels,
                self.patch.patch_size,
                self.patch.overlap,
            ),
            encoder: EncoderConfig {
                embed_dim: self.encoder.embed_dim,
                depth: self.encoder.depth,
                heads: self.encoder.heads,
                mlp_ratio: self.encoder.mlp_ratio,
                dropout: self.encoder.dropout,
            },
            rpn: RpnConfig {
                kernel_size: self.rpn.kernel_size,
                hidden_dim: self.rpn.hidden_dim,
                nms_iou: self.rpn.nms_iou,
                pre_nms_top: self.rpn.pre_nms_top,
                post_nms_top: self.rpn.post_nms_top,
                anchors: AnchorSpec {
                    scales: self.rpn.anchor_scales.clone(),
                    aspect_ratios: self.rpn.anchor_ratios.clone(),
                },
            },
            roi: RoiConfig {
                pool_size: self.roi.pool_size,
                head_hidden: self.roi.head_hidden,
                num_classes: self.roi.num_classes,
            },
        }
    }

    pub fn schedule(&self) -> TrainSchedule {
        TrainSchedule {
            phase1_iters: self.train.phase1_iters,
            phase2_iters: self.train.phase2_iters,
            batch_size: self.train.batch_size,
            rois_per_image: self.train.rois_per_image,
            seed: self.train.seed,
            warmup_iters: self.train.warmup_iters,
            augment_hflip: self.train.augment_hflip,
            include_gt_rois: self.train.include_gt_rois,
        }
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            lr: self.train.lr,
            weight_decay: self.train.weight_decay,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            eps: self.train.adam_eps,
        }
    }

    pub fn detect_options(&self) -> DetectOptions {
        DetectOptions {
            score_threshold: self.detect.score_threshold,
            nms_iou: self.detect.nms_iou,
            max_detections: self.detect.max_detections,
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        PathBuf::from(&self.output.dir)
    }

    /// Validate every component invariant up front, before any compute.
    pub fn validate(&self) -> Result<(), String> {
        self.model_config().validate()?;
        self.schedule().validate().map_err(|e| format!("train: {}", e))?;
        if self.train.lr <= 0.0 {
            return Err("train.lr must be positive".into());
        }
        if !(0.0..1.0).contains(&self.train.beta1) || !(0.0..1.0).contains(&self.train.beta2) {
            return Err("train.beta1/beta2 must lie in [0,1)".into());
        }
        if self.dataset.resize_target == 0 {
            return Err("dataset.resize_target must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.detect.score_threshold) {
            return Err("detect.score_threshold must lie in [0,1]".into());
        }
        if !(0.0..=1.0).contains(&self.detect.nms_iou) {
            return Err("detect.nms_iou must lie in [0,1]".into());
        }
        if self.dataset.mode == DatasetMode::Coco && self.dataset.train_annotations.is_empty() {
            return Err("dataset.mode = \"coco\" requires dataset.train_annotations".into());
        }
        Ok(())
    }
}

/// Write bytes atomically: temp file in the same directory, then rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp_write");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_the_desk_profile_and_validates() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let mc = cfg.model_config();
        assert_eq!(mc, crate::model::desk_config());
        assert_eq!(mc.grid(), 11);
    }

    #[test]
    fn config_round_trip_is_a_fixpoint() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        let again = RunConfig::parse(&text).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.to_toml(), text);
    }

    #[test]
    fn flags_in_file_override_defaults() {
        let cfg = RunConfig::parse(
            "[train]\nphase1_iters = 7\nseed = 9\n\n[encoder]\ndepth = 2\n",
        )
        .unwrap();
        assert_eq!(cfg.train.phase1_iters, 7);
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.encoder.depth, 2);
        assert_eq!(cfg.patch.image_size, 96); // untouched default
    }

    #[test]
    fn invalid_patching_is_rejected_with_field_names() {
        let err = RunConfig::parse("[patch]\npatch_size = 16\noverlap = 13\n").unwrap_err();
        assert!(err.contains("P=16") && err.contains("m=13"), "{}", err);
    }

    #[test]
    fn even_rpn_kernel_rejected() {
        let err = RunConfig::parse("[rpn]\nkernel_size = 4\n").unwrap_err();
        assert!(err.contains("odd"), "{}", err);
    }
}
