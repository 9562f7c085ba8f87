//! Binary checkpoint format, version 1.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic  b"DTNC"
//! u32    format version (1)
//! u32    config length, then that many bytes of TOML (RunConfig snapshot)
//! u64    iteration counter
//! u32    parameter count, then per parameter:
//!          u32 name length + utf-8 name
//!          u8 rank + u32 extents
//!          f32 data (numel values)
//! 2x optimizer state (phase 1, then phase 2):
//!          u64 step
//!          u32 touched count, then per touched parameter:
//!            u32 parameter index, f32 first moments, f32 second moments
//! u32    crc32 of everything above
//! ```

use std::path::Path;

use thiserror::Error;

use super::{atomic_write, RunConfig};
use crate::model::Model;
use crate::params::ParamId;
use crate::train::{AdamState, Moments, TrainState};

const MAGIC: &[u8; 4] = b"DTNC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access checkpoint {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path} is not a checkpoint (bad magic)")]
    BadMagic { path: String },
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    BadVersion { found: u32, expected: u32 },
    #[error("checkpoint is corrupt: checksum mismatch")]
    ChecksumMismatch,
    #[error("checkpoint is truncated or malformed: {0}")]
    Truncated(String),
    #[error("checkpoint config snapshot does not parse: {0}")]
    BadConfig(String),
    #[error("checkpoint parameter {name} has shape {found:?} but the model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("checkpoint is missing parameter {0}")]
    MissingParam(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptSnapshot {
    pub step: u64,
    /// (parameter index, first moments, second moments)
    pub touched: Vec<(u32, Vec<f32>, Vec<f32>)>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub iteration: u64,
    pub params: Vec<(String, Vec<usize>, Vec<f32>)>,
    pub opt_phase1: OptSnapshot,
    pub opt_phase2: OptSnapshot,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated(format!(
                "wanted {} bytes at offset {}, file has {}",
                n,
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, CheckpointError> {
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn push_f32s(out: &mut Vec<u8>, values: &[f32]) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn opt_snapshot(state: &AdamState<f32>) -> OptSnapshot {
    OptSnapshot {
        step: state.step,
        touched: state
            .moments
            .iter()
            .enumerate()
            .filter_map(|(i, m)| {
                m.as_ref()
                    .map(|mm| (i as u32, mm.m.clone(), mm.v.clone()))
            })
            .collect(),
    }
}

fn restore_opt(snapshot: &OptSnapshot, state: &mut AdamState<f32>) {
    state.step = snapshot.step;
    for slot in &mut state.moments {
        *slot = None;
    }
    for (idx, m, v) in &snapshot.touched {
        state.moments[*idx as usize] = Some(Moments {
            m: m.clone(),
            v: v.clone(),
        });
    }
}

impl Checkpoint {
    /// Snapshot a model and training position.
    pub fn capture(config: &RunConfig, model: &Model, train: &TrainState) -> Checkpoint {
        Checkpoint {
            config: config.clone(),
            iteration: train.iteration as u64,
            params: model
                .store
                .iter()
                .map(|(_, p)| {
                    (
                        p.name.clone(),
                        p.value.shape().to_vec(),
                        p.value.data().to_vec(),
                    )
                })
                .collect(),
            opt_phase1: opt_snapshot(&train.opt_phase1),
            opt_phase2: opt_snapshot(&train.opt_phase2),
        }
    }

    /// Write parameters and optimizer state back. Parameters are matched by
    /// name with exact shape checks.
    pub fn restore(&self, model: &mut Model, train: &mut TrainState) -> Result<(), CheckpointError> {
        self.restore_params(model)?;
        train.iteration = self.iteration as usize;
        restore_opt(&self.opt_phase1, &mut train.opt_phase1);
        restore_opt(&self.opt_phase2, &mut train.opt_phase2);
        Ok(())
    }

    pub fn restore_params(&self, model: &mut Model) -> Result<(), CheckpointError> {
        for (name, shape, data) in &self.params {
            let pid: ParamId = model
                .store
                .find(name)
                .ok_or_else(|| CheckpointError::MissingParam(name.clone()))?;
            let t = model.store.tensor_mut(pid);
            if t.shape() != &shape[..] {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.clone(),
                    found: shape.clone(),
                    expected: t.shape().to_vec(),
                });
            }
            t.data_mut().copy_from_slice(data);
        }
        // every model parameter must be covered
        for (_, p) in model.store.iter() {
            if !self.params.iter().any(|(n, _, _)| n == &p.name) {
                return Err(CheckpointError::MissingParam(p.name.clone()));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let cfg = self.config.to_toml();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, shape, data) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            push_f32s(&mut out, data);
        }
        for opt in [&self.opt_phase1, &self.opt_phase2] {
            out.extend_from_slice(&opt.step.to_le_bytes());
            out.extend_from_slice(&(opt.touched.len() as u32).to_le_bytes());
            for (idx, m, v) in &opt.touched {
                out.extend_from_slice(&idx.to_le_bytes());
                push_f32s(&mut out, m);
                push_f32s(&mut out, v);
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Checkpoint, CheckpointError> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic { path: path.into() });
        }
        if bytes.len() < 4 + 4 {
            return Err(CheckpointError::Truncated("missing header".into()));
        }
        let body = &bytes[..bytes.len() - 4];
        let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        if crc32fast::hash(body) != stored_crc {
            return Err(CheckpointError::ChecksumMismatch);
        }

        let mut r = Reader { bytes: body, pos: 4 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::BadVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let cfg_len = r.u32()? as usize;
        let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
            .map_err(|e| CheckpointError::BadConfig(e.to_string()))?;
        let config =
            RunConfig::parse(cfg_text).map_err(CheckpointError::BadConfig)?;
        let iteration = r.u64()?;
        let n_params = r.u32()? as usize;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| CheckpointError::Truncated(e.to_string()))?
                .to_string();
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let data = r.f32s(numel)?;
            params.push((name, shape, data));
        }
        let mut opts = Vec::with_capacity(2);
        for _ in 0..2 {
            let step = r.u64()?;
            let touched_count = r.u32()? as usize;
            let mut touched = Vec::with_capacity(touched_count);
            for _ in 0..touched_count {
                let idx = r.u32()?;
                if idx as usize >= n_params {
                    return Err(CheckpointError::Truncated(format!(
                        "optimizer references parameter index {} of {}",
                        idx, n_params
                    )));
                }
                let numel: usize = params[idx as usize].1.iter().product();
                let m = r.f32s(numel)?;
                let v = r.f32s(numel)?;
                touched.push((idx, m, v));
            }
            opts.push(OptSnapshot { step, touched });
        }
        let opt_phase2 = opts.pop().unwrap();
        let opt_phase1 = opts.pop().unwrap();
        if r.pos != body.len() {
            return Err(CheckpointError::Truncated(format!(
                "{} trailing bytes",
                body.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            config,
            iteration,
            params,
            opt_phase1,
            opt_phase2,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        atomic_write(path, &self.to_bytes()).map_err(|e| CheckpointError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|e| CheckpointError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Checkpoint::from_bytes(&bytes, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;
    use crate::train::TrainState;

    fn tiny_run_config() -> RunConfig {
        RunConfig::parse(
            "[patch]\nimage_size = 32\npatch_size = 8\noverlap = 2\n\n\
             [encoder]\nembed_dim = 16\ndepth = 1\nheads = 2\nmlp_ratio = 2\n\n\
             [residual]\nblocks = 1\n\n\
             [rpn]\nhidden_dim = 16\npre_nms_top = 50\npost_nms_top = 20\nanchor_scales = [8.0, 16.0]\n\n\
             [roi]\npool_size = 3\nhead_hidden = 32\n",
        )
        .unwrap()
    }

    #[test]
    fn save_load_reproduces_params_bit_exactly() {
        let cfg = tiny_run_config();
        let mut model = Model::init(cfg.model_config(), cfg.train.seed);
        let mut state = TrainState::new(&model, cfg.schedule(), cfg.adam());
        state.iteration = 17;
        state.opt_phase1.step = 3;
        state.opt_phase1.moments[0] = Some(crate::train::Moments {
            m: vec![0.5; model.store.tensor(crate::params::ParamId(0)).numel()],
            v: vec![0.25; model.store.tensor(crate::params::ParamId(0)).numel()],
        });

        let ckpt = Checkpoint::capture(&cfg, &model, &state);
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, "mem").unwrap();
        assert_eq!(back.iteration, 17);
        assert_eq!(back.config, cfg);
        assert_eq!(back.opt_phase1, ckpt.opt_phase1);

        // mutate then restore: everything returns bit-exactly
        let originals: Vec<Vec<u32>> = model
            .store
            .ids()
            .map(|i| model.store.tensor(i).data().iter().map(|v| v.to_bits()).collect())
            .collect();
        for id in model.store.ids().collect::<Vec<_>>() {
            for v in model.store.tensor_mut(id).data_mut() {
                *v += 1.0;
            }
        }
        let mut state2 = TrainState::new(&model, cfg.schedule(), cfg.adam());
        back.restore(&mut model, &mut state2).unwrap();
        assert_eq!(state2.iteration, 17);
        assert_eq!(state2.opt_phase1.step, 3);
        let restored: Vec<Vec<u32>> = model
            .store
            .ids()
            .map(|i| model.store.tensor(i).data().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(originals, restored);
    }

    #[test]
    fn serialization_is_byte_deterministic() {
        let cfg = tiny_run_config();
        let model = Model::init(cfg.model_config(), 1);
        let state = TrainState::new(&model, cfg.schedule(), cfg.adam());
        let a = Checkpoint::capture(&cfg, &model, &state).to_bytes();
        let b = Checkpoint::capture(&cfg, &model, &state).to_bytes();
        assert_eq!(a, b);
    }

    #[test]
    fn corruption_is_detected() {
        let cfg = tiny_run_config();
        let model = Model::init(cfg.model_config(), 1);
        let state = TrainState::new(&model, cfg.schedule(), cfg.adam());
        let mut bytes = Checkpoint::capture(&cfg, &model, &state).to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes, "mem"),
            Err(CheckpointError::ChecksumMismatch)
        ));
        assert!(matches!(
            Checkpoint::from_bytes(b"nope", "mem"),
            Err(CheckpointError::BadMagic { .. })
        ));
    }

    #[test]
    fn shape_mismatch_is_detected() {
        let cfg = tiny_run_config();
        let model = Model::init(cfg.model_config(), 1);
        let state = TrainState::new(&model, cfg.schedule(), cfg.adam());
        let ckpt = Checkpoint::capture(&cfg, &model, &state);

        // a model with a different embed dim cannot accept these params
        let mut other_cfg = tiny_run_config();
        other_cfg.encoder.embed_dim = 8;
        other_cfg.encoder.heads = 2;
        let mut other = Model::init(other_cfg.model_config(), 1);
        assert!(matches!(
            ckpt.restore_params(&mut other),
            Err(CheckpointError::ShapeMismatch { .. })
        ));
    }
}
