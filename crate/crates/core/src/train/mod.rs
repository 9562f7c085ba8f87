//! Two-phase training: the backbone and RPN learn under the proposal loss,
//! are then frozen, and the ROI head learns on frozen-RPN proposals.
//!
//! Every source of randomness in an iteration (batch choice, flip
//! augmentation, anchor and ROI sampling) draws from a generator derived
//! from `(seed, phase, iteration)`, so any iteration can be reproduced (and
//! training resumed) without replaying history.

pub mod loss;
pub mod optim;

pub use loss::{
    roi_loss, rpn_loss, sample_rois, sample_rpn_anchors, LossParts, RoiExample, RpnSample,
    ROI_POSITIVE_IOU, RPN_SAMPLE_ANCHORS, SMOOTH_L1_BETA,
};
pub use optim::{AdamHyper, AdamState, Moments};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{backbone_forward, DropoutCtx};
use crate::data::DatasetManifest;
use crate::detector::{assign_rpn_labels, propose, roi_pool_taps, rpn_forward, taps_cast, BBox};
use crate::detector::detection_head;
use crate::model::Model;
use crate::params::{accumulate_grads, TapeParams};
use crate::rng::Rng;
use crate::tensor::Tape;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at iteration {iteration} (phase {phase})")]
    NonFiniteLoss { iteration: usize, phase: u8 },
    #[error("non-finite gradient in parameter {param}")]
    NonFiniteGradient { param: String },
    #[error("training dataset is empty")]
    EmptyDataset,
}

/// Iteration counts and sampling knobs for the two phases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub phase1_iters: usize,
    pub phase2_iters: usize,
    /// Images per iteration.
    pub batch_size: usize,
    /// Sampled ROIs per image in phase 2.
    pub rois_per_image: usize,
    pub seed: u64,
    /// Linear learning-rate warmup, applied from the start of each phase.
    pub warmup_iters: usize,
    /// Horizontal-flip augmentation with p = 0.5 during training.
    pub augment_hflip: bool,
    /// Add ground-truth boxes to the phase-2 ROI candidate pool.
    pub include_gt_rois: bool,
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<(), String> {
        if self.batch_size == 0 {
            return Err("batch_size must be positive".into());
        }
        if self.rois_per_image == 0 {
            return Err("rois_per_image must be positive".into());
        }
        Ok(())
    }

    pub fn total_iters(&self) -> usize {
        self.phase1_iters + self.phase2_iters
    }
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            phase1_iters: 2000,
            phase2_iters: 2000,
            batch_size: 2,
            rois_per_image: 64,
            seed: 42,
            warmup_iters: 100,
            augment_hflip: true,
            include_gt_rois: true,
        }
    }
}

/// One training iteration's losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub phase: u8,
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub trace: Vec<LossRecord>,
}

const PHASE1_STREAM: u64 = 1 << 32;
const PHASE2_STREAM: u64 = 2 << 32;

/// Resumable training position: the iteration counter plus both optimizer
/// states. Everything else an iteration needs is derived from the seed.
pub struct TrainState {
    pub schedule: TrainSchedule,
    pub iteration: usize,
    pub opt_phase1: AdamState<f32>,
    pub opt_phase2: AdamState<f32>,
}

impl TrainState {
    pub fn new(model: &Model, schedule: TrainSchedule, hyper: AdamHyper) -> TrainState {
        TrainState {
            schedule,
            iteration: 0,
            opt_phase1: AdamState::new(hyper, model.store.len()),
            opt_phase2: AdamState::new(hyper, model.store.len()),
        }
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.schedule.total_iters()
    }

    pub fn phase(&self) -> u8 {
        if self.iteration < self.schedule.phase1_iters {
            1
        } else {
            2
        }
    }

    fn warmup_scale(&self, phase_iter: usize) -> f64 {
        if self.schedule.warmup_iters == 0 {
            1.0
        } else {
            ((phase_iter + 1) as f64 / self.schedule.warmup_iters as f64).min(1.0)
        }
    }

    /// Run one iteration and return its loss record.
    pub fn step(&mut self, model: &mut Model, data: &DatasetManifest) -> Result<LossRecord, TrainError> {
        if data.samples.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        assert!(!self.is_done(), "step past the end of the schedule");
        let record = if self.phase() == 1 {
            self.phase1_step(model, data)?
        } else {
            self.phase2_step(model, data)?
        };
        self.iteration += 1;
        Ok(record)
    }

    fn phase1_step(&mut self, model: &mut Model, data: &DatasetManifest) -> Result<LossRecord, TrainError> {
        let it = self.iteration;
        let sched = self.schedule;
        let mut rng = Rng::derive(sched.seed, PHASE1_STREAM + it as u64);
        let batch: Vec<usize> = (0..sched.batch_size).map(|_| rng.below(data.samples.len())).collect();
        let scale = 1.0 / sched.batch_size as f32;

        let Model {
            store,
            backbone,
            rpn,
            cfg,
            anchors,
            ..
        } = model;
        store.zero_grads();

        let mut parts_sum = LossParts::default();
        for idx in batch {
            let sample = if sched.augment_hflip && rng.chance(0.5) {
                data.samples[idx].hflipped()
            } else {
                data.samples[idx].clone()
            };
            let gt_boxes: Vec<BBox> = sample.annotations.iter().map(|a| a.bbox).collect();

            let mut tape = Tape::new().with_finite_checks(false);
            let mut tp = TapeParams::new(&*store, true);
            let dropout = (cfg.encoder.dropout > 0.0).then(|| DropoutCtx {
                rng: &mut rng,
                prob: cfg.encoder.dropout,
            });
            let (_, fm) = backbone_forward(
                &mut tape,
                &mut tp,
                backbone,
                &sample.pixels,
                &cfg.patch,
                cfg.encoder.heads,
                dropout,
            );
            let (obj, deltas) = rpn_forward(&mut tape, &mut tp, rpn, fm);
            let labels = assign_rpn_labels(anchors, &gt_boxes);
            let anchor_sample = sample_rpn_anchors(&labels, anchors, &gt_boxes, &mut rng);
            let (loss, parts) = rpn_loss(&mut tape, obj, deltas, &anchor_sample);
            if !parts.total.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    iteration: it,
                    phase: 1,
                });
            }
            let scaled = tape.mul_scalar(loss, scale);
            tape.backward(scaled);
            let bindings = tp.bindings().to_vec();
            accumulate_grads(store, &tape, &bindings);

            parts_sum.total += parts.total * scale as f64;
            parts_sum.cls += parts.cls * scale as f64;
            parts_sum.reg += parts.reg * scale as f64;
        }

        let lr_scale = self.warmup_scale(it);
        let mut ids = backbone.param_ids();
        ids.extend(rpn.param_ids());
        self.opt_phase1.step(store, &ids, lr_scale)?;
        store.zero_grads();

        Ok(LossRecord {
            iteration: it,
            phase: 1,
            total: parts_sum.total,
            cls: parts_sum.cls,
            reg: parts_sum.reg,
        })
    }

    fn phase2_step(&mut self, model: &mut Model, data: &DatasetManifest) -> Result<LossRecord, TrainError> {
        let it = self.iteration;
        let sched = self.schedule;
        let phase_iter = it - sched.phase1_iters;
        let mut rng = Rng::derive(sched.seed, PHASE2_STREAM + it as u64);
        let batch: Vec<usize> = (0..sched.batch_size).map(|_| rng.below(data.samples.len())).collect();
        let scale = 1.0 / sched.batch_size as f32;

        let Model {
            store,
            backbone,
            rpn,
            roi,
            cfg,
            anchors,
        } = model;
        store.zero_grads();

        let image_size = cfg.image_size() as f64;
        let grid = cfg.grid();
        let q = cfg.roi.pool_size;
        let mut parts_sum = LossParts::default();
        for idx in batch {
            let sample = if sched.augment_hflip && rng.chance(0.5) {
                data.samples[idx].hflipped()
            } else {
                data.samples[idx].clone()
            };

            // frozen forward: backbone + RPN + proposals + pooling, no grads
            let mut frozen = Tape::new().with_finite_checks(false);
            let mut tp0 = TapeParams::new(&*store, false);
            let (_, fm) = backbone_forward(
                &mut frozen,
                &mut tp0,
                backbone,
                &sample.pixels,
                &cfg.patch,
                cfg.encoder.heads,
                None,
            );
            let (obj, deltas) = rpn_forward(&mut frozen, &mut tp0, rpn, fm);
            let proposals = propose(
                frozen.tensor(obj),
                frozen.tensor(deltas),
                anchors,
                &cfg.rpn,
                image_size,
            );

            let mut candidates: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
            if sched.include_gt_rois {
                candidates.extend(sample.annotations.iter().map(|a| a.bbox));
            }
            if candidates.is_empty() {
                continue;
            }
            let gts: Vec<(BBox, usize)> = sample
                .annotations
                .iter()
                .map(|a| (a.bbox, a.class_id))
                .collect();
            let examples = sample_rois(
                &candidates,
                &gts,
                cfg.roi.num_classes,
                sched.rois_per_image,
                &mut rng,
            );
            if examples.is_empty() {
                continue;
            }

            let pooled_rows: Vec<_> = examples
                .iter()
                .map(|e| {
                    let taps = taps_cast::<f32>(&roi_pool_taps(&e.bbox, grid, image_size, q));
                    let p = frozen.roi_pool(fm, taps, q);
                    frozen.reshape(p, vec![1, cfg.pooled_len()])
                })
                .collect();
            let pooled_all = frozen.concat(&pooled_rows, 0);
            let pooled = frozen.tensor(pooled_all).clone();

            // trainable head pass
            let mut tape = Tape::new().with_finite_checks(false);
            let mut tp = TapeParams::new(&*store, true);
            let rows = tape.constant(pooled);
            let (cls, reg) = detection_head(&mut tape, &mut tp, roi, rows);
            let (loss, parts) = roi_loss(&mut tape, cls, reg, &examples);
            if !parts.total.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    iteration: it,
                    phase: 2,
                });
            }
            let scaled = tape.mul_scalar(loss, scale);
            tape.backward(scaled);
            let bindings = tp.bindings().to_vec();
            accumulate_grads(store, &tape, &bindings);

            parts_sum.total += parts.total * scale as f64;
            parts_sum.cls += parts.cls * scale as f64;
            parts_sum.reg += parts.reg * scale as f64;
        }

        let lr_scale = self.warmup_scale(phase_iter);
        let ids = roi.param_ids();
        self.opt_phase2.step(store, &ids, lr_scale)?;
        store.zero_grads();

        Ok(LossRecord {
            iteration: it,
            phase: 2,
            total: parts_sum.total,
            cls: parts_sum.cls,
            reg: parts_sum.reg,
        })
    }
}

/// Train both phases to completion. Phase 1 optimizes backbone + RPN under
/// the RPN loss; phase 2 freezes those parameters bit-exactly and optimizes
/// the ROI head on frozen-RPN proposals. Fully deterministic under a fixed
/// seed.
pub fn train_two_phase(
    model: &mut Model,
    data: &DatasetManifest,
    schedule: TrainSchedule,
    hyper: AdamHyper,
) -> Result<TrainReport, TrainError> {
    let mut state = TrainState::new(model, schedule, hyper);
    let mut report = TrainReport::default();
    while !state.is_done() {
        report.trace.push(state.step(model, data)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;
    use crate::model::{tiny_config, Model};

    fn tiny_setup(seed: u64) -> (Model, DatasetManifest) {
        let model = Model::init(tiny_config(3), seed);
        let data = generate_synthetic(4, 32, 99);
        (model, data)
    }

    fn short_schedule(p1: usize, p2: usize) -> TrainSchedule {
        TrainSchedule {
            phase1_iters: p1,
            phase2_iters: p2,
            batch_size: 2,
            rois_per_image: 16,
            seed: 5,
            warmup_iters: 4,
            augment_hflip: true,
            include_gt_rois: true,
        }
    }

    fn store_bits(model: &Model, ids: &[crate::params::ParamId]) -> Vec<u32> {
        ids.iter()
            .flat_map(|&id| model.store.tensor(id).data().iter().map(|v| v.to_bits()))
            .collect()
    }

    #[test]
    fn zero_phase2_leaves_roi_head_at_init() {
        let (mut model, data) = tiny_setup(1);
        let before = store_bits(&model, &model.phase2_param_ids());
        train_two_phase(&mut model, &data, short_schedule(6, 0), AdamHyper::default()).unwrap();
        let after = store_bits(&model, &model.phase2_param_ids());
        assert_eq!(before, after);
        // and phase 1 params did move
        let moved = store_bits(&model, &model.phase1_param_ids());
        let fresh = Model::init(tiny_config(3), 1);
        assert_ne!(moved, store_bits(&fresh, &fresh.phase1_param_ids()));
    }

    #[test]
    fn fixed_seed_gives_bit_identical_loss_traces_and_weights() {
        let (mut m1, data) = tiny_setup(2);
        let (mut m2, _) = tiny_setup(2);
        let r1 = train_two_phase(&mut m1, &data, short_schedule(5, 5), AdamHyper::default()).unwrap();
        let r2 = train_two_phase(&mut m2, &data, short_schedule(5, 5), AdamHyper::default()).unwrap();
        assert_eq!(r1.trace, r2.trace);
        let all1: Vec<u32> = m1.store.ids().flat_map(|i| m1.store.tensor(i).data().iter().map(|v| v.to_bits())).collect();
        let all2: Vec<u32> = m2.store.ids().flat_map(|i| m2.store.tensor(i).data().iter().map(|v| v.to_bits())).collect();
        assert_eq!(all1, all2);
    }

    #[test]
    fn phase1_params_frozen_bit_exactly_through_phase2() {
        let (mut model, data) = tiny_setup(3);
        let schedule = short_schedule(4, 0);
        train_two_phase(&mut model, &data, schedule, AdamHyper::default()).unwrap();
        let frozen = store_bits(&model, &model.phase1_param_ids());

        // continue with phase 2 only
        let schedule2 = TrainSchedule {
            phase1_iters: 0,
            phase2_iters: 6,
            ..short_schedule(0, 6)
        };
        train_two_phase(&mut model, &data, schedule2, AdamHyper::default()).unwrap();
        assert_eq!(frozen, store_bits(&model, &model.phase1_param_ids()));
        // head moved
        let fresh = Model::init(tiny_config(3), 3);
        assert_ne!(
            store_bits(&model, &model.phase2_param_ids()),
            store_bits(&fresh, &fresh.phase2_param_ids())
        );
    }

    #[test]
    fn resume_from_midpoint_is_bit_identical() {
        let (mut uninterrupted, data) = tiny_setup(4);
        let schedule = short_schedule(4, 4);
        let hyper = AdamHyper::default();
        train_two_phase(&mut uninterrupted, &data, schedule, hyper).unwrap();

        let (mut resumed, _) = tiny_setup(4);
        let mut state = TrainState::new(&resumed, schedule, hyper);
        for _ in 0..3 {
            state.step(&mut resumed, &data).unwrap();
        }
        // "kill": rebuild a fresh state at the same iteration with the same
        // optimizer contents, as a checkpoint restore would
        let mut restored = TrainState::new(&resumed, schedule, hyper);
        restored.iteration = state.iteration;
        restored.opt_phase1 = state.opt_phase1.clone();
        restored.opt_phase2 = state.opt_phase2.clone();
        while !restored.is_done() {
            restored.step(&mut resumed, &data).unwrap();
        }

        let a: Vec<u32> = uninterrupted
            .store
            .ids()
            .flat_map(|i| uninterrupted.store.tensor(i).data().iter().map(|v| v.to_bits()))
            .collect();
        let b: Vec<u32> = resumed
            .store
            .ids()
            .flat_map(|i| resumed.store.tensor(i).data().iter().map(|v| v.to_bits()))
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let (mut model, mut data) = tiny_setup(5);
        data.samples.clear();
        let err = train_two_phase(&mut model, &data, short_schedule(1, 0), AdamHyper::default());
        assert!(matches!(err, Err(TrainError::EmptyDataset)));
    }

    #[test]
    fn images_without_gt_still_train_phase1() {
        let (mut model, mut data) = tiny_setup(6);
        for s in &mut data.samples {
            s.annotations.clear();
        }
        let report =
            train_two_phase(&mut model, &data, short_schedule(3, 0), AdamHyper::default()).unwrap();
        for rec in &report.trace {
            assert!(rec.reg == 0.0, "no-gt images must have no regression term");
            assert!(rec.total.is_finite());
        }
    }
}
