//! Central-finite-difference verification of analytic gradients.
//!
//! The oracle never touches the backward pass: it re-runs the forward
//! computation at `x ± h` and compares `(f(x+h) - f(x-h)) / 2h` against the
//! gradient the tape produced. All checks run in double precision, where an
//! `h` of 1e-5 leaves ~6 orders of magnitude of headroom below the 1e-4
//! acceptance tolerance.

use crate::backbone::{backbone_forward, BackboneParams, EncoderConfig, PatchConfig};
use crate::detector::{
    assign_rpn_labels, detection_head, roi_pool_taps, rpn_forward, taps_cast, BBox, RoiHeadParams,
    RpnParams,
};
use crate::params::{accumulate_grads, ParamId, ParamStore, TapeParams};
use crate::rng::Rng;
use crate::tensor::{tape::BilinearTap, Tape, Tensor, TensorId};
use crate::train::{roi_loss, rpn_loss, sample_rois, sample_rpn_anchors, RoiExample};

pub const DEFAULT_STEP: f64 = 1e-5;
/// Step for end-to-end checks through relu stacks: a narrower kink window.
pub const LOSS_STEP: f64 = 1e-6;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const LOSS_TOLERANCE: f64 = 1e-3;

/// Worst relative error seen while checking one loss function.
#[derive(Debug, Clone, Copy)]
pub struct CheckOutcome {
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

impl CheckOutcome {
    fn merge(self, other: CheckOutcome) -> CheckOutcome {
        CheckOutcome {
            max_rel_err: self.max_rel_err.max(other.max_rel_err),
            coords_checked: self.coords_checked + other.coords_checked,
        }
    }
}

/// Relative error with a floor so near-zero gradient pairs compare
/// absolutely at the same tolerance.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Check the gradient of a scalar-valued tape program with respect to every
/// input tensor, by central differences on each coordinate.
///
/// `build` must construct the same computation for every call; inputs are
/// registered as tape leaves in the order given.
pub fn check_loss_fn(
    inputs: &[Tensor<f64>],
    build: &dyn Fn(&mut Tape<f64>, &[TensorId]) -> TensorId,
    step: f64,
) -> CheckOutcome {
    let eval = |perturbed: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = build(&mut tape, &ids);
        tape.data(loss)[0]
    };

    // analytic pass
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let loss = build(&mut tape, &ids);
    tape.backward(loss);
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).expect("gradient populated").to_vec())
        .collect();

    let mut outcome = CheckOutcome {
        max_rel_err: 0.0,
        coords_checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for ci in 0..input.numel() {
            let orig = input.data()[ci];
            work[ti].data_mut()[ci] = orig + step;
            let fp = eval(&work);
            work[ti].data_mut()[ci] = orig - step;
            let fm = eval(&work);
            work[ti].data_mut()[ci] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let e = rel_err(analytic[ti][ci], numeric);
            outcome.max_rel_err = outcome.max_rel_err.max(e);
            outcome.coords_checked += 1;
        }
    }
    outcome
}

/// Result of checking one operation over many random instances.
#[derive(Debug, Clone)]
pub struct OpReport {
    pub name: String,
    pub instances: usize,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn rand_tensor(rng: &mut Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::generate(shape, || rng.range_f64(lo, hi))
}

/// Away-from-zero samples for kinked activations.
fn rand_tensor_offset(rng: &mut Rng, shape: Vec<usize>, min_abs: f64) -> Tensor<f64> {
    Tensor::generate(shape, || {
        let v = rng.range_f64(min_abs, 1.0);
        if rng.chance(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Scalar loss via a fixed random projection, so non-scalar outputs reduce
/// without masking any coordinate.
fn project(tape: &mut Tape<f64>, out: TensorId, proj: &Tensor<f64>) -> TensorId {
    let p = tape.constant(proj.clone());
    let prod = tape.mul(out, p);
    tape.sum_all(prod)
}

type CaseRunner = Box<dyn Fn(&mut Rng) -> CheckOutcome>;

fn run_case(name: &str, instances: usize, tolerance: f64, rng: &mut Rng, runner: CaseRunner) -> OpReport {
    let mut outcome = CheckOutcome {
        max_rel_err: 0.0,
        coords_checked: 0,
    };
    for _ in 0..instances {
        outcome = outcome.merge(runner(rng));
    }
    OpReport {
        name: name.to_string(),
        instances,
        coords_checked: outcome.coords_checked,
        max_rel_err: outcome.max_rel_err,
        tolerance,
    }
}

/// Gradient-check every differentiable primitive over `instances` random
/// small-shape cases each.
pub fn op_suite(seed: u64, instances: usize) -> Vec<OpReport> {
    let mut rng = Rng::new(seed);
    let mut reports = Vec::new();
    let mut check = |name: &str, rng: &mut Rng, runner: CaseRunner| {
        let r = run_case(name, instances, OP_TOLERANCE, rng, runner);
        reports.push(r);
    };

    check(
        "matmul",
        &mut rng,
        Box::new(|rng| {
            let (m, k, n) = (rng.range_usize(2, 5), rng.range_usize(2, 6), rng.range_usize(2, 5));
            let a = rand_tensor(rng, vec![m, k], -1.0, 1.0);
            let b = rand_tensor(rng, vec![k, n], -1.0, 1.0);
            let proj = rand_tensor(rng, vec![m, n], -1.0, 1.0);
            check_loss_fn(
                &[a, b],
                &|tape, ids| {
                    let out = tape.matmul(ids[0], ids[1]);
                    project(tape, out, &proj)
                },
                DEFAULT_STEP,
            )
        }),
    );

    check(
        "conv2d",
        &mut rng,
        Box::new(|rng| {
            let (h, w) = (rng.range_usize(3, 6), rng.range_usize(3, 6));
            let cin = rng.range_usize(1, 3);
            let cout = rng.range_usize(1, 3);
            let kext = if rng.chance(0.5) { 1 } else { 3 };
            let img = rand_tensor(rng, vec![h, w, cin], -1.0, 1.0);
            let ker = rand_tensor(rng, vec![kext, kext, cin, cout], -1.0, 1.0);
            let bias = rand_tensor(rng, vec![cout], -0.5, 0.5);
            let proj = rand_tensor(rng, vec![h, w, cout], -1.0, 1.0);
            check_loss_fn(
                &[img, ker, bias],
                &|tape, ids| {
                    let out = tape.conv2d(ids[0], ids[1], ids[2]);
                    project(tape, out, &proj)
                },
                DEFAULT_STEP,
            )
        }),
    );

    check(
        "add",
        &mut rng,
        Box::new(|rng| {
            let shape = vec![rng.range_usize(2, 4), rng.range_usize(2, 5)];
            let a = rand_tensor(rng, shape.clone(), -1.0, 1.0);
            let b = rand_tensor(rng, shape.clone(), -1.0, 1.0);
            let proj = rand_tensor(rng, shape, -1.0, 1.0);
            check_loss_fn(
                &[a, b],
                &|tape, ids| {
                    let out = tape.add(ids[0], ids[1]);
                    project(tape, out, &proj)
                },
                DEFAULT_STEP,
            )
        }),
    );

    check(
        "sub",
        &mut rng,
        Box::new(|rng| {
            let shape = vec![rng.range_usize(2, 4), rng.range_usize(2, 5)];
            let a = rand_tensor(rng, shape.clone(), -1.0, 1.0);
            let b = rand_tensor(rng, shape.clone(), -1.0, 1.0);
            let proj = rand_tensor(rng, shape, -1.0, 1.0);
            check_loss_fn(
                &[a, b],
                &|tape, ids| {
                    let out = tape.sub(ids[0], ids[1]);
                    project(tape, out, &proj)
                },
                DEFAULT_STEP,
            )
        }),
    );

    check(
        "mul",
        &mut rng,
        Box::new(|rng| {
            let shape = vec![rng.range_usize(2, 4), rng.range_usize(2, 5)];
            let a = rand_tensor(rng, shape.clone(), -1.0, 1.0);
            let b = rand_tensor(rng, shape.clone(), -1.0, 1.0);
            let proj = rand_tensor(rng, shape, -1.0, 1.0);
            check_loss_fn(
                &[a, b],
                &|tape, ids| {
                    let out = tape.mul(ids[0], ids[1]);
                    project(tape, out, &proj)
                },
                DEFAULT_STEP,
            )
        }),
    );

    check(
        "add_scalar",
        &mut rng,
        Box::new(|rng| {
            let shape = vec![rng.range_usize(2, 5)];
            let a = rand_tensor(rng, shape.clone(), -1.0, 1.0);
            let c = rng.range_f64(-2.0, 2.0);
            let proj = rand_tensor(rng, shape, -1.0, 1.0);
            check_loss_fn(
                &[a],
                &|tape, ids| {
                    let out = tape.add_scalar(ids[0], c);
                    project(tape, out, &proj)
                },
                DEFAULT_STEP,
            )
        }),
    );

    check(
        "mul_scalar",
        &mut rng,
        Box::new(|rng| {
            let shape = vec![rng.range_usize(2, 5)];
            let a = rand_tensor(rng, shape.clone(), -1.0, 1.0);
            let c = rng.range_f64(-2.0, 2.0);
            let proj = rand_tensor(rng, shape, -1.0, 1.0);
            check_loss_fn(
                &[a],
                &|tape, ids| {
                    let out = tape.mul_scalar(ids[0], c);
                    project(tape, out, &proj)
                },
                DEFAULT_STEP,
            )
        }),
    );

    check(
        "add_bias",
        &mut rng,
        Box::new(|rng| {
            let (n, d) = (rng.range_usize(2, 4), rng.range_usize(2, 5));
            let a = rand_tensor(rng, vec![n, d], -1.0, 1.0);
            let b = rand_tensor(rng, vec![d], -1.0, 1.0);
            let proj = rand_tensor(rng, vec![n, d], -1.0, 1.0);
            check_loss_fn(
                &[a, b],
                &|tape, ids| {
                    let out = tape.add_bias(ids[0], ids[1]);
                    project(tape, out, &proj)
                },
                DEFAULT_STEP,
            )
        }),
    );

    check(
        "relu",
        &mut rng,
        Box::new(|rng| {
            let shape = vec![rng.range_usize(2, 4), rng.range_usize(2, 5)];
            // keep samples away from the kink at zero
            let a = rand_tensor_offset(rng, shape.clone(), 0.05);
            let proj = rand_tensor(rng, shape, -1.0, 1.0);
            check_loss_fn(
                &[a],
                &|tape, ids| {
                    let out = tape.relu(ids[0]);
                    project(tape, out, &proj)
                },
                DEFAULT_STEP,
            )
        }),
    );

    check(
        "gelu",
        &mut rng,
        Box::new(|rng| {
            let shape = vec![rng.range_usize(2, 6)];
            let a = rand_tensor(rng, shape.clone(), -2.0, 2.0);
            let proj = rand_tensor(rng, shape, -1.0, 1.0);
            check_loss_fn(
                &[a],
                &|tape, ids| {
                    let out = tape.gelu(ids[0]);
                    project(tape, out, &proj)
                },
                DEFAULT_STEP,
            )
        }),
    );

    check(
        "sigmoid",
        &mut rng,
        Box::new(|rng| {
            let shape = vec![rng.range_usize(2, 6)];
            let a = rand_tensor(rng, shape.clone(), -3.0, 3.0);
            let proj = rand_tensor(rng, shape, -1.0, 1.0);
            check_loss_fn(
                &[a],
                &|tape, ids| {
                    let out = tape.sigmoid(ids[0]);
                    project(tape, out, &proj)
                },
                DEFAULT_STEP,
            )
        }),
    );

    check(
        "exp",
        &mut rng,
        Box::new(|rng| {
            let shape = vec![rng.range_usize(2, 6)];
            let a = rand_tensor(rng, shape.clone(), -1.0, 1.0);
            let proj = rand_tensor(rng, shape, -1.0, 1.0);
            check_loss_fn(
                &[a],
                &|tape, ids| {
                    let out = tape.exp(ids[0]);
                    project(tape, out, &proj)
                },
                DEFAULT_STEP,
            )
        }),
    );

    check(
        "log",
        &mut rng,
        Box::new(|rng| {
            let shape = vec![rng.range_usize(2, 6)];
            let a = rand_tensor(rng, shape.clone(), 0.2, 2.0);
            let proj = rand_tensor(rng, shape, -1.0, 1.0);
            check_loss_fn(
                &[a],
                &|tape, ids| {
                    let out = tape.log(ids[0]);
                    project(tape, out, &proj)
                },
                DEFAULT_STEP,
            )
        }),
    );

    check(
        "sum",
        &mut rng,
        Box::new(|rng| {
            let shape = vec![rng.range_usize(2, 4), rng.range_usize(2, 4)];
            let a = rand_tensor(rng, shape, -1.0, 1.0);
            check_loss_fn(&[a], &|tape, ids| tape.sum_all(ids[0]), DEFAULT_STEP)
        }),
    );

    check(
        "mean",
        &mut rng,
        Box::new(|rng| {
            let shape = vec![rng.range_usize(2, 4), rng.range_usize(2, 4)];
            let a = rand_tensor(rng, shape, -1.0, 1.0);
            check_loss_fn(&[a], &|tape, ids| tape.mean_all(ids[0]), DEFAULT_STEP)
        }),
    );

    check(
        "softmax",
        &mut rng,
        Box::new(|rng| {
            let (r, c) = (rng.range_usize(2, 4), rng.range_usize(3, 9));
            let axis = rng.below(2);
            let a = rand_tensor(rng, vec![r, c], -2.0, 2.0);
            let proj = rand_tensor(rng, vec![r, c], -1.0, 1.0);
            check_loss_fn(
                &[a],
                &|tape, ids| {
                    let out = tape.softmax(ids[0], axis);
                    project(tape, out, &proj)
                },
                DEFAULT_STEP,
            )
        }),
    );

    check(
        "layernorm",
        &mut rng,
        Box::new(|rng| {
            let (n, d) = (rng.range_usize(2, 4), rng.range_usize(3, 8));
            let x = rand_tensor(rng, vec![n, d], -1.0, 1.0);
            let gamma = rand_tensor(rng, vec![d], 0.5, 1.5);
            let beta = rand_tensor(rng, vec![d], -0.5, 0.5);
            let proj = rand_tensor(rng, vec![n, d], -1.0, 1.0);
            check_loss_fn(
                &[x, gamma, beta],
                &|tape, ids| {
                    let out = tape.layernorm(ids[0], ids[1], ids[2], 1e-5);
                    project(tape, out, &proj)
                },
                DEFAULT_STEP,
            )
        }),
    );

    check(
        "reshape",
        &mut rng,
        Box::new(|rng| {
            let (r, c) = (rng.range_usize(2, 4), rng.range_usize(2, 4));
            let a = rand_tensor(rng, vec![r, c], -1.0, 1.0);
            let proj = rand_tensor(rng, vec![c * r], -1.0, 1.0);
            check_loss_fn(
                &[a],
                &|tape, ids| {
                    let out = tape.reshape(ids[0], vec![r * c]);
                    project(tape, out, &proj)
                },
                DEFAULT_STEP,
            )
        }),
    );

    check(
        "transpose",
        &mut rng,
        Box::new(|rng| {
            let (r, c) = (rng.range_usize(2, 4), rng.range_usize(2, 5));
            let a = rand_tensor(rng, vec![r, c], -1.0, 1.0);
            let proj = rand_tensor(rng, vec![c, r], -1.0, 1.0);
            check_loss_fn(
                &[a],
                &|tape, ids| {
                    let out = tape.transpose(ids[0]);
                    project(tape, out, &proj)
                },
                DEFAULT_STEP,
            )
        }),
    );

    check(
        "slice",
        &mut rng,
        Box::new(|rng| {
            let (r, c) = (rng.range_usize(3, 6), rng.range_usize(3, 6));
            let axis = rng.below(2);
            let extent = [r, c][axis];
            let start = rng.below(extent - 1);
            let len = rng.range_usize(1, extent - start + 1);
            let a = rand_tensor(rng, vec![r, c], -1.0, 1.0);
            let mut out_shape = vec![r, c];
            out_shape[axis] = len;
            let proj = rand_tensor(rng, out_shape, -1.0, 1.0);
            check_loss_fn(
                &[a],
                &|tape, ids| {
                    let out = tape.slice(ids[0], axis, start, len);
                    project(tape, out, &proj)
                },
                DEFAULT_STEP,
            )
        }),
    );

    check(
        "concat",
        &mut rng,
        Box::new(|rng| {
            let r = rng.range_usize(2, 4);
            let (c1, c2) = (rng.range_usize(1, 4), rng.range_usize(1, 4));
            let a = rand_tensor(rng, vec![r, c1], -1.0, 1.0);
            let b = rand_tensor(rng, vec![r, c2], -1.0, 1.0);
            let proj = rand_tensor(rng, vec![r, c1 + c2], -1.0, 1.0);
            check_loss_fn(
                &[a, b],
                &|tape, ids| {
                    let out = tape.concat(&[ids[0], ids[1]], 1);
                    project(tape, out, &proj)
                },
                DEFAULT_STEP,
            )
        }),
    );

    check(
        "gather",
        &mut rng,
        Box::new(|rng| {
            let n = rng.range_usize(4, 10);
            let k = rng.range_usize(1, 7);
            let indices: Vec<usize> = (0..k).map(|_| rng.below(n)).collect();
            let a = rand_tensor(rng, vec![n], -1.0, 1.0);
            let proj = rand_tensor(rng, vec![k], -1.0, 1.0);
            check_loss_fn(
                &[a],
                &|tape, ids| {
                    let out = tape.gather(ids[0], indices.clone());
                    project(tape, out, &proj)
                },
                DEFAULT_STEP,
            )
        }),
    );

    check(
        "dropout",
        &mut rng,
        Box::new(|rng| {
            let n = rng.range_usize(4, 10);
            let mask: Vec<bool> = (0..n).map(|_| rng.chance(0.7)).collect();
            let a = rand_tensor(rng, vec![n], -1.0, 1.0);
            let proj = rand_tensor(rng, vec![n], -1.0, 1.0);
            check_loss_fn(
                &[a],
                &|tape, ids| {
                    let out = tape.dropout(ids[0], mask.clone(), 0.7);
                    project(tape, out, &proj)
                },
                DEFAULT_STEP,
            )
        }),
    );

    check(
        "roi_pool",
        &mut rng,
        Box::new(|rng| {
            let g = rng.range_usize(3, 6);
            let d = rng.range_usize(1, 4);
            let q = rng.range_usize(1, 4);
            let taps: Vec<BilinearTap<f64>> = (0..q * q)
                .map(|_| {
                    let mut ws = [0.0; 4];
                    let mut total = 0.0;
                    for w in ws.iter_mut() {
                        *w = rng.range_f64(0.05, 1.0);
                        total += *w;
                    }
                    let c0 = rng.below(g * g);
                    [
                        (c0, ws[0] / total),
                        (rng.below(g * g), ws[1] / total),
                        (rng.below(g * g), ws[2] / total),
                        (rng.below(g * g), ws[3] / total),
                    ]
                })
                .collect();
            let fm = rand_tensor(rng, vec![g, g, d], -1.0, 1.0);
            let proj = rand_tensor(rng, vec![q, q, d], -1.0, 1.0);
            check_loss_fn(
                &[fm],
                &|tape, ids| {
                    let out = tape.roi_pool(ids[0], taps.clone(), q);
                    project(tape, out, &proj)
                },
                DEFAULT_STEP,
            )
        }),
    );

    check(
        "bce_with_logits",
        &mut rng,
        Box::new(|rng| {
            let n = rng.range_usize(2, 9);
            let logits = rand_tensor(rng, vec![n], -3.0, 3.0);
            let targets: Vec<f64> = (0..n).map(|_| if rng.chance(0.5) { 1.0 } else { 0.0 }).collect();
            check_loss_fn(
                &[logits],
                &|tape, ids| tape.bce_with_logits_mean(ids[0], targets.clone()),
                DEFAULT_STEP,
            )
        }),
    );

    check(
        "softmax_cross_entropy",
        &mut rng,
        Box::new(|rng| {
            let (n, c) = (rng.range_usize(2, 5), rng.range_usize(2, 6));
            let logits = rand_tensor(rng, vec![n, c], -2.0, 2.0);
            let classes: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
            check_loss_fn(
                &[logits],
                &|tape, ids| tape.softmax_ce_mean(ids[0], classes.clone()),
                DEFAULT_STEP,
            )
        }),
    );

    check(
        "smooth_l1",
        &mut rng,
        Box::new(|rng| {
            let n = rng.range_usize(2, 9);
            let beta = 1.0;
            let pred = rand_tensor(rng, vec![n], -1.0, 1.0);
            // keep |pred - target| away from the transition at beta
            let targets: Vec<f64> = pred
                .data()
                .iter()
                .map(|&p| {
                    let d = if rng.chance(0.5) {
                        rng.range_f64(-0.8 * beta, 0.8 * beta)
                    } else {
                        let m = rng.range_f64(1.2 * beta, 2.5 * beta);
                        if rng.chance(0.5) {
                            m
                        } else {
                            -m
                        }
                    };
                    p - d
                })
                .collect();
            check_loss_fn(
                &[pred],
                &|tape, ids| tape.smooth_l1_sum(ids[0], targets.clone(), beta),
                DEFAULT_STEP,
            )
        }),
    );

    reports
}

/// Check a scalar loss built from store parameters against central
/// differences on a random subset of coordinates per parameter. The build
/// closure must be deterministic (fix any sampling outside it).
pub fn check_store_loss(
    store: &ParamStore<f64>,
    check_params: &[ParamId],
    coords_per_param: usize,
    build: &dyn Fn(&mut Tape<f64>, &mut TapeParams<'_, f64>) -> TensorId,
    step: f64,
    rng: &mut Rng,
) -> CheckOutcome {
    // analytic gradients, folded back into a store clone
    let mut tape = Tape::new();
    let mut tp = TapeParams::new(store, true);
    let loss = build(&mut tape, &mut tp);
    tape.backward(loss);
    let bindings = tp.bindings().to_vec();
    let mut grad_store = store.clone();
    accumulate_grads(&mut grad_store, &tape, &bindings);

    let eval = |s: &ParamStore<f64>| -> f64 {
        let mut tape = Tape::new();
        let mut tp = TapeParams::new(s, false);
        let loss = build(&mut tape, &mut tp);
        tape.data(loss)[0]
    };

    let mut work = store.clone();
    let mut outcome = CheckOutcome {
        max_rel_err: 0.0,
        coords_checked: 0,
    };
    for &pid in check_params {
        let numel = store.tensor(pid).numel();
        for ci in rng.sample_indices(numel, coords_per_param) {
            let orig = work.tensor(pid).data()[ci];
            work.tensor_mut(pid).data_mut()[ci] = orig + step;
            let fp = eval(&work);
            work.tensor_mut(pid).data_mut()[ci] = orig - step;
            let fm = eval(&work);
            work.tensor_mut(pid).data_mut()[ci] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let analytic = grad_store
                .tensor(pid)
                .grad
                .as_ref()
                .map_or(0.0, |g| g[ci]);
            outcome.max_rel_err = outcome.max_rel_err.max(rel_err(analytic, numeric));
            outcome.coords_checked += 1;
        }
    }
    outcome
}

struct TinyDetector {
    store: ParamStore<f64>,
    backbone: BackboneParams,
    rpn: RpnParams,
    roi: RoiHeadParams,
    patch: PatchConfig,
    encoder: EncoderConfig,
}

/// A miniature end-to-end model in double precision: 16px input, 3x3 token
/// grid, one encoder layer, one residual block, two anchors per cell.
///
/// Every parameter is re-drawn at unit-ish scale: training-style tiny
/// initializations put relu preactivations so close to zero that a finite
/// difference step can cross the kink and corrupt the comparison.
fn tiny_detector(rng: &mut Rng) -> TinyDetector {
    let patch = PatchConfig::square(16, 3, 8, 4);
    let encoder = EncoderConfig {
        embed_dim: 8,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        dropout: 0.0,
    };
    let mut store = ParamStore::new();
    let backbone = BackboneParams::init(&mut store, rng, &patch, &encoder, 1);
    let rpn = RpnParams::init(&mut store, rng, 3, 8, 8, 2);
    let roi = RoiHeadParams::init(&mut store, rng, 2 * 2 * 8, 8, 2);
    for id in store.ids().collect::<Vec<_>>() {
        let positive = store.name(id).contains("gamma");
        let t = store.tensor_mut(id);
        for v in t.data_mut() {
            *v = if positive {
                rng.range_f64(0.5, 1.5)
            } else {
                rng.range_f64(-0.5, 0.5)
            };
        }
    }
    TinyDetector {
        store,
        backbone,
        rpn,
        roi,
        patch,
        encoder,
    }
}

fn tiny_anchors() -> Vec<BBox> {
    crate::detector::generate_anchors(
        3,
        16.0,
        &crate::detector::AnchorSpec {
            scales: vec![6.0, 10.0],
            aspect_ratios: vec![1.0],
        },
    )
}

fn random_gt_boxes(rng: &mut Rng, n: usize, size: f64) -> Vec<BBox> {
    (0..n)
        .map(|_| {
            let x0 = rng.range_f64(0.0, size * 0.5);
            let y0 = rng.range_f64(0.0, size * 0.5);
            BBox::new(
                x0,
                y0,
                x0 + rng.range_f64(size * 0.25, size * 0.45),
                y0 + rng.range_f64(size * 0.25, size * 0.45),
            )
        })
        .collect()
}

/// Gradient-check both training losses end to end through the backbone,
/// on a random weight subset, in double precision.
pub fn loss_suite(seed: u64, instances: usize) -> Vec<OpReport> {
    let mut rng = Rng::new(seed);
    let mut rpn_outcome = CheckOutcome {
        max_rel_err: 0.0,
        coords_checked: 0,
    };
    let mut roi_outcome = rpn_outcome;

    for _ in 0..instances {
        let model = tiny_detector(&mut rng);
        let image = Tensor::<f64>::generate(vec![16, 16, 3], || rng.range_f64(-1.0, 1.0));
        let anchors = tiny_anchors();
        let n_gt = 1 + rng.below(2);
        let gts = random_gt_boxes(&mut rng, n_gt, 16.0);

        // fix the anchor sample outside the closure so every call sees the
        // same computation
        let labels = assign_rpn_labels(&anchors, &gts);
        let anchor_sample = sample_rpn_anchors(&labels, &anchors, &gts, &mut rng);
        let check: Vec<ParamId> = model.store.ids().collect();
        {
            let m = &model;
            let image = image.clone();
            let out = check_store_loss(
                &m.store,
                &check,
                3,
                &|tape, tp| {
                    let (_, fm) = backbone_forward(
                        tape,
                        tp,
                        &m.backbone,
                        &image,
                        &m.patch,
                        m.encoder.heads,
                        None,
                    );
                    let (obj, deltas) = rpn_forward(tape, tp, &m.rpn, fm);
                    rpn_loss(tape, obj, deltas, &anchor_sample).0
                },
                LOSS_STEP,
                &mut rng,
            );
            rpn_outcome = rpn_outcome.merge(out);
        }

        // roi loss: fixed ROI examples drawn from jittered ground truth
        let candidates: Vec<BBox> = gts
            .iter()
            .flat_map(|g| {
                let j = rng.range_f64(-1.5, 1.5);
                [
                    *g,
                    BBox::new(
                        (g.x_min + j).max(0.0),
                        (g.y_min + j).max(0.0),
                        (g.x_max + j).min(16.0),
                        (g.y_max + j).min(16.0),
                    ),
                ]
            })
            .collect();
        let gt_pairs: Vec<(BBox, usize)> = gts.iter().map(|&b| (b, rng.below(2))).collect();
        let examples: Vec<RoiExample> = sample_rois(&candidates, &gt_pairs, 2, 8, &mut rng);
        {
            let m = &model;
            let image = image.clone();
            let out = check_store_loss(
                &m.store,
                &check,
                3,
                &|tape, tp| {
                    let (_, fm) = backbone_forward(
                        tape,
                        tp,
                        &m.backbone,
                        &image,
                        &m.patch,
                        m.encoder.heads,
                        None,
                    );
                    let rows: Vec<TensorId> = examples
                        .iter()
                        .map(|e| {
                            let taps = taps_cast::<f64>(&roi_pool_taps(&e.bbox, 3, 16.0, 2));
                            let p = tape.roi_pool(fm, taps, 2);
                            tape.reshape(p, vec![1, 2 * 2 * 8])
                        })
                        .collect();
                    let pooled = tape.concat(&rows, 0);
                    let (cls, reg) = detection_head(tape, tp, &m.roi, pooled);
                    roi_loss(tape, cls, reg, &examples).0
                },
                LOSS_STEP,
                &mut rng,
            );
            roi_outcome = roi_outcome.merge(out);
        }
    }

    vec![
        OpReport {
            name: "rpn_loss (end-to-end)".to_string(),
            instances,
            coords_checked: rpn_outcome.coords_checked,
            max_rel_err: rpn_outcome.max_rel_err,
            tolerance: LOSS_TOLERANCE,
        },
        OpReport {
            name: "roi_loss (end-to-end)".to_string(),
            instances,
            coords_checked: roi_outcome.coords_checked,
            max_rel_err: roi_outcome.max_rel_err,
            tolerance: LOSS_TOLERANCE,
        },
    ]
}
