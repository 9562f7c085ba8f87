//! Bias-corrected Adam with L2-style weight decay (decay added to the
//! gradient before the moment updates).

use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParamStore};
use crate::tensor::Scalar;

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        // lr 0.001, weight decay 0.0001, first-moment coefficient 0.9
        AdamHyper {
            lr: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments<S: Scalar> {
    pub m: Vec<S>,
    pub v: Vec<S>,
}

/// Per-parameter first/second moment accumulators plus the step counter.
/// Moment buffers allocate on first touch, so an optimizer that only ever
/// updates a parameter subset carries state only for that subset.
#[derive(Debug, Clone)]
pub struct AdamState<S: Scalar> {
    pub hyper: AdamHyper,
    pub step: u64,
    pub moments: Vec<Option<Moments<S>>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(hyper: AdamHyper, num_params: usize) -> Self {
        AdamState {
            hyper,
            step: 0,
            moments: vec![None; num_params],
        }
    }

    /// One update over `params`, reading `store` gradients. A missing
    /// gradient is treated as zero. `lr_scale` applies warmup.
    pub fn step(
        &mut self,
        store: &mut ParamStore<S>,
        params: &[ParamId],
        lr_scale: f64,
    ) -> Result<(), TrainError> {
        self.step += 1;
        let t = self.step as f64;
        let lr = S::from_f64(self.hyper.lr * lr_scale);
        let wd = S::from_f64(self.hyper.weight_decay);
        let b1 = S::from_f64(self.hyper.beta1);
        let b2 = S::from_f64(self.hyper.beta2);
        let eps = S::from_f64(self.hyper.eps);
        let bc1 = S::from_f64(1.0 - self.hyper.beta1.powf(t));
        let bc2 = S::from_f64(1.0 - self.hyper.beta2.powf(t));

        for &pid in params {
            let name_check = {
                let tensor = store.tensor(pid);
                tensor
                    .grad
                    .as_ref()
                    .map_or(false, |g| g.iter().any(|v| !v.is_finite()))
            };
            if name_check {
                return Err(TrainError::NonFiniteGradient {
                    param: store.name(pid).to_string(),
                });
            }
            let numel = store.tensor(pid).numel();
            let slot = &mut self.moments[pid.index()];
            let moments = slot.get_or_insert_with(|| Moments {
                m: vec![S::ZERO; numel],
                v: vec![S::ZERO; numel],
            });
            let tensor = store.tensor_mut(pid);
            let grad_opt = tensor.grad.take();
            let zero = vec![S::ZERO; numel];
            let grad: &[S] = grad_opt.as_deref().unwrap_or(&zero);
            for i in 0..numel {
                let g = grad[i] + wd * tensor.data()[i];
                moments.m[i] = b1 * moments.m[i] + (S::ONE - b1) * g;
                moments.v[i] = b2 * moments.v[i] + (S::ONE - b2) * g * g;
                let m_hat = moments.m[i] / bc1;
                let v_hat = moments.v[i] / bc2;
                tensor.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            tensor.grad = grad_opt;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single_param(value: f64) -> (ParamStore<f64>, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(value));
        (store, id)
    }

    #[test]
    fn zero_grads_zero_decay_leave_params_unchanged() {
        let (mut store, id) = single_param(3.25);
        let mut opt = AdamState::new(
            AdamHyper {
                weight_decay: 0.0,
                ..AdamHyper::default()
            },
            store.len(),
        );
        store.tensor_mut(id).grad = Some(vec![0.0]);
        for _ in 0..5 {
            opt.step(&mut store, &[id], 1.0).unwrap();
        }
        assert_eq!(store.tensor(id).data()[0], 3.25);
    }

    #[test]
    fn single_step_matches_hand_computed_update() {
        let theta0 = 0.7;
        let g = -0.4;
        let h = AdamHyper {
            lr: 0.01,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let (mut store, id) = single_param(theta0);
        let mut opt = AdamState::new(h, store.len());
        store.tensor_mut(id).grad = Some(vec![g]);
        opt.step(&mut store, &[id], 1.0).unwrap();

        // hand evaluation of the recurrences at t = 1
        let m = (1.0 - 0.9) * g;
        let v = (1.0 - 0.999) * g * g;
        let m_hat = m / (1.0 - 0.9f64);
        let v_hat = v / (1.0 - 0.999f64);
        let expect = theta0 - 0.01 * m_hat / (v_hat.sqrt() + 1e-8);
        let got = store.tensor(id).data()[0];
        assert!((got - expect).abs() < 1e-10, "{} vs {}", got, expect);
    }

    #[test]
    fn two_steps_match_hand_computed_updates() {
        let h = AdamHyper {
            lr: 0.05,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let (mut store, id) = single_param(1.0);
        let mut opt = AdamState::new(h, store.len());
        let grads = [0.3, -0.2];

        let mut theta = 1.0;
        let mut m = 0.0;
        let mut v = 0.0;
        for (t, &g) in grads.iter().enumerate() {
            store.tensor_mut(id).grad = Some(vec![g]);
            opt.step(&mut store, &[id], 1.0).unwrap();

            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let m_hat = m / (1.0 - 0.9f64.powi(t as i32 + 1));
            let v_hat = v / (1.0 - 0.999f64.powi(t as i32 + 1));
            theta -= 0.05 * m_hat / (v_hat.sqrt() + 1e-8);
            let got = store.tensor(id).data()[0];
            assert!((got - theta).abs() < 1e-10, "step {}: {} vs {}", t, got, theta);
        }
    }

    #[test]
    fn weight_decay_alone_shrinks_magnitude() {
        let h = AdamHyper {
            lr: 0.01,
            weight_decay: 0.1,
            ..AdamHyper::default()
        };
        let (mut store, id) = single_param(2.0);
        let mut opt = AdamState::new(h, store.len());
        let mut last = 2.0;
        for _ in 0..10 {
            store.tensor_mut(id).grad = Some(vec![0.0]);
            opt.step(&mut store, &[id], 1.0).unwrap();
            let now: f64 = store.tensor(id).data()[0];
            assert!(now.abs() < last.abs(), "{} !< {}", now, last);
            last = now;
        }
    }

    #[test]
    fn nan_gradient_aborts_with_param_name() {
        let (mut store, id) = single_param(1.0);
        let mut opt = AdamState::new(AdamHyper::default(), store.len());
        store.tensor_mut(id).grad = Some(vec![f64::NAN]);
        let err = opt.step(&mut store, &[id], 1.0).unwrap_err();
        assert!(err.to_string().contains("w"), "{}", err);
    }

    #[test]
    fn untouched_params_carry_no_moments() {
        let mut store = ParamStore::<f32>::new();
        let a = store.add("a", Tensor::scalar(1.0f32));
        let _b = store.add("b", Tensor::scalar(2.0f32));
        let mut opt = AdamState::new(AdamHyper::default(), store.len());
        store.tensor_mut(a).grad = Some(vec![0.5]);
        opt.step(&mut store, &[a], 1.0).unwrap();
        assert!(opt.moments[0].is_some());
        assert!(opt.moments[1].is_none());
    }
}
