//! End-to-end model: backbone -> feature map -> RPN -> proposals -> ROI
//! head, bundled with its configuration and parameter store.

use serde::{Deserialize, Serialize};

use crate::backbone::{backbone_forward, BackboneParams, EncoderConfig, PatchConfig};
use crate::data::ImageSample;
use crate::detector::{
    decode_box, detection_head, generate_anchors, nms_indices, propose, roi_pool_taps,
    rpn_forward, taps_cast, BBox, Detection, Proposal, RoiHeadParams, RpnConfig, RpnParams,
};
use crate::params::{ParamId, ParamStore, TapeParams};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};

/// ROI head configuration. `num_classes` excludes background.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiConfig {
    /// Pooled grid extent q (output is q*q*D).
    pub pool_size: usize,
    pub head_hidden: usize,
    pub num_classes: usize,
}

impl RoiConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.pool_size == 0 || self.head_hidden == 0 || self.num_classes == 0 {
            return Err("roi pool_size, head_hidden and num_classes must be positive".into());
        }
        Ok(())
    }
}

/// Everything that determines model shapes.
/// (`res_blocks` leads so the TOML form keeps scalar keys before tables.)
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub res_blocks: usize,
    pub patch: PatchConfig,
    pub encoder: EncoderConfig,
    pub rpn: RpnConfig,
    pub roi: RoiConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.patch.validate().map_err(|e| format!("patch: {}", e))?;
        self.encoder.validate().map_err(|e| format!("encoder: {}", e))?;
        self.rpn.validate().map_err(|e| format!("rpn: {}", e))?;
        self.roi.validate().map_err(|e| format!("roi: {}", e))?;
        let g = self.patch.patches_per_side();
        if self.rpn.kernel_size > g {
            return Err(format!(
                "rpn kernel {} exceeds the {}x{} feature grid",
                self.rpn.kernel_size, g, g
            ));
        }
        Ok(())
    }

    /// Feature-grid side g (= patches per side).
    pub fn grid(&self) -> usize {
        self.patch.patches_per_side()
    }

    /// Square input extent in pixels.
    pub fn image_size(&self) -> usize {
        self.patch.height
    }

    pub fn pooled_len(&self) -> usize {
        self.roi.pool_size * self.roi.pool_size * self.encoder.embed_dim
    }
}

const INIT_STREAM: u64 = 0x1a17;

/// Model weights plus precomputed anchors.
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore<f32>,
    pub backbone: BackboneParams,
    pub rpn: RpnParams,
    pub roi: RoiHeadParams,
    pub anchors: Vec<BBox>,
}

impl Model {
    /// Deterministic initialization from a seed: same seed, same weights.
    pub fn init(cfg: ModelConfig, seed: u64) -> Model {
        cfg.validate().unwrap_or_else(|e| panic!("invalid model config: {}", e));
        let mut rng = Rng::derive(seed, INIT_STREAM);
        let mut store = ParamStore::new();
        let backbone = BackboneParams::init(&mut store, &mut rng, &cfg.patch, &cfg.encoder, cfg.res_blocks);
        let rpn = RpnParams::init(
            &mut store,
            &mut rng,
            cfg.rpn.kernel_size,
            cfg.encoder.embed_dim,
            cfg.rpn.hidden_dim,
            cfg.rpn.anchors.per_cell(),
        );
        let roi = RoiHeadParams::init(
            &mut store,
            &mut rng,
            cfg.pooled_len(),
            cfg.roi.head_hidden,
            cfg.roi.num_classes,
        );
        let anchors = generate_anchors(cfg.grid(), cfg.image_size() as f64, &cfg.rpn.anchors);
        Model {
            cfg,
            store,
            backbone,
            rpn,
            roi,
            anchors,
        }
    }

    /// Parameters trained in phase 1 and frozen afterwards.
    pub fn phase1_param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.backbone.param_ids();
        ids.extend(self.rpn.param_ids());
        ids
    }

    /// ROI-head parameters, trained in phase 2.
    pub fn phase2_param_ids(&self) -> Vec<ParamId> {
        self.roi.param_ids()
    }

    /// Gradient-free forward of backbone + RPN.
    /// Returns (feature map, objectness logits, deltas) as plain tensors.
    pub fn forward_features(&self, image: &Tensor<f32>) -> (Tensor<f32>, Tensor<f32>, Tensor<f32>) {
        let mut tape = Tape::new();
        let mut tp = TapeParams::new(&self.store, false);
        let (_, fm) = backbone_forward(
            &mut tape,
            &mut tp,
            &self.backbone,
            image,
            &self.cfg.patch,
            self.cfg.encoder.heads,
            None,
        );
        let (obj, deltas) = rpn_forward(&mut tape, &mut tp, &self.rpn, fm);
        (
            tape.tensor(fm).clone(),
            tape.tensor(obj).clone(),
            tape.tensor(deltas).clone(),
        )
    }

    /// Proposals for one image at the model's input scale.
    pub fn propose_image(&self, image: &Tensor<f32>) -> (Tensor<f32>, Vec<Proposal>) {
        let (fm, obj, deltas) = self.forward_features(image);
        let proposals = propose(
            &obj,
            &deltas,
            &self.anchors,
            &self.cfg.rpn,
            self.cfg.image_size() as f64,
        );
        (fm, proposals)
    }

    /// Pool a set of boxes from a feature map into `[R, q*q*D]` rows.
    pub fn pool_rois(&self, fm: &Tensor<f32>, boxes: &[BBox]) -> Tensor<f32> {
        let q = self.cfg.roi.pool_size;
        let size = self.cfg.image_size() as f64;
        let g = self.cfg.grid();
        let mut tape = Tape::new();
        let fm_id = tape.constant(fm.clone());
        let rows: Vec<_> = boxes
            .iter()
            .map(|b| {
                let taps = taps_cast::<f32>(&roi_pool_taps(b, g, size, q));
                let pooled = tape.roi_pool(fm_id, taps, q);
                tape.reshape(pooled, vec![1, self.cfg.pooled_len()])
            })
            .collect();
        let all = tape.concat(&rows, 0);
        tape.tensor(all).clone()
    }

    /// Run the ROI head on pooled rows; returns (class logits, deltas).
    pub fn head_outputs(&self, pooled: &Tensor<f32>) -> (Tensor<f32>, Tensor<f32>) {
        let mut tape = Tape::new();
        let mut tp = TapeParams::new(&self.store, false);
        let rows = tape.constant(pooled.clone());
        let (cls, reg) = detection_head(&mut tape, &mut tp, &self.roi, rows);
        (tape.tensor(cls).clone(), tape.tensor(reg).clone())
    }

    /// Full detection pipeline on a sample already at the model scale.
    /// Scores are class posteriors; boxes are refined per-class, clipped,
    /// filtered by score, suppressed per class and capped globally.
    pub fn detect(&self, sample: &ImageSample, opts: &DetectOptions) -> Vec<Detection> {
        assert_eq!(
            sample.pixels.shape(),
            &[
                self.cfg.patch.height,
                self.cfg.patch.width,
                self.cfg.patch.channels
            ],
            "detect: sample shape {:?} does not match the model input {:?}",
            sample.pixels.shape(),
            (
                self.cfg.patch.height,
                self.cfg.patch.width,
                self.cfg.patch.channels
            )
        );
        let (fm, proposals) = self.propose_image(&sample.pixels);
        if proposals.is_empty() {
            return Vec::new();
        }
        let boxes: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
        let pooled = self.pool_rois(&fm, &boxes);
        let (cls_logits, reg) = self.head_outputs(&pooled);

        let k = self.cfg.roi.num_classes;
        let size = self.cfg.image_size() as f64;
        let mut candidates: Vec<Detection> = Vec::new();
        for (r, proposal) in proposals.iter().enumerate() {
            // softmax over K+1 logits
            let row: Vec<f64> = (0..k + 1).map(|c| cls_logits.at2(r, c) as f64).collect();
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in 0..k {
                let score = exps[c] / z;
                if score < opts.score_threshold {
                    continue;
                }
                let d = [
                    reg.at2(r, 4 * c) as f64,
                    reg.at2(r, 4 * c + 1) as f64,
                    reg.at2(r, 4 * c + 2) as f64,
                    reg.at2(r, 4 * c + 3) as f64,
                ];
                if let Some(bbox) = decode_box(&proposal.bbox, d, size, size) {
                    candidates.push(Detection {
                        bbox,
                        class_id: c,
                        score,
                    });
                }
            }
        }

        // per-class NMS, then a global cap by score
        let mut kept: Vec<Detection> = Vec::new();
        for c in 0..k {
            let class_dets: Vec<&Detection> = candidates.iter().filter(|d| d.class_id == c).collect();
            let boxes: Vec<BBox> = class_dets.iter().map(|d| d.bbox).collect();
            let scores: Vec<f64> = class_dets.iter().map(|d| d.score).collect();
            for i in nms_indices(&boxes, &scores, opts.nms_iou) {
                kept.push(class_dets[i].clone());
            }
        }
        kept.sort_by(|a, b| b.score.partial_cmp(&a.score).expect("finite scores"));
        kept.truncate(opts.max_detections);
        kept
    }
}

/// Inference-time thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectOptions {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for DetectOptions {
    fn default() -> Self {
        DetectOptions {
            score_threshold: 0.05,
            nms_iou: 0.5,
            max_detections: 100,
        }
    }
}

/// The committed desk-scale profile: 96px inputs, 16px patches with 8px
/// overlap (11x11 token grid), 64-dim 4-layer encoder, 3 single-ratio
/// anchor scales, 3 classes.
pub fn desk_config() -> ModelConfig {
    ModelConfig {
        res_blocks: 2,
        patch: PatchConfig::square(96, 3, 16, 8),
        encoder: EncoderConfig {
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            dropout: 0.0,
        },
        rpn: RpnConfig {
            kernel_size: 3,
            hidden_dim: 64,
            anchors: crate::detector::AnchorSpec {
                scales: vec![8.0, 16.0, 24.0],
                aspect_ratios: vec![1.0],
            },
            nms_iou: 0.7,
            pre_nms_top: 300,
            post_nms_top: 100,
        },
        roi: RoiConfig {
            pool_size: 7,
            head_hidden: 256,
            num_classes: 3,
        },
    }
}

/// A small profile for fast tests: 32px inputs, 5x5 grid, shallow encoder.
pub fn tiny_config(num_classes: usize) -> ModelConfig {
    ModelConfig {
        res_blocks: 1,
        patch: PatchConfig::square(32, 3, 8, 2),
        encoder: EncoderConfig {
            embed_dim: 16,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            dropout: 0.0,
        },
        rpn: RpnConfig {
            kernel_size: 3,
            hidden_dim: 16,
            anchors: crate::detector::AnchorSpec {
                scales: vec![8.0, 16.0],
                aspect_ratios: vec![1.0],
            },
            nms_iou: 0.7,
            pre_nms_top: 50,
            post_nms_top: 20,
        },
        roi: RoiConfig {
            pool_size: 3,
            head_hidden: 32,
            num_classes,
        },
    }
}
