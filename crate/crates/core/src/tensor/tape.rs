//! Computation tape: records primitive ops in execution order and replays
//! them in reverse to accumulate gradients.
//!
//! Every node owns its output tensor. Backward walks the node list from the
//! loss to the leaves, visiting each op exactly once, and `+=`s into the
//! gradient buffers of the inputs. Callers zero or harvest gradients between
//! steps; the tape itself never resets them mid-pass.

use rayon::prelude::*;

use super::{assert_same_shape, Scalar, Tensor};

/// Handle to a tensor registered on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// One bilinear sample: four (flat cell index, weight) taps into a feature
/// map viewed as `[g*g, channels]`. Weights sum to 1.
pub type BilinearTap<S> = [(usize, S); 4];

#[derive(Debug, Clone)]
enum Op<S: Scalar> {
    Leaf,
    Matmul { a: usize, b: usize },
    Conv2d { input: usize, kernel: usize, bias: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddScalar { a: usize },
    MulScalar { a: usize, c: S },
    AddBias { a: usize, bias: usize },
    Relu { a: usize },
    Gelu { a: usize },
    Sigmoid { a: usize },
    Exp { a: usize },
    Log { a: usize },
    SumAll { a: usize },
    MeanAll { a: usize },
    Softmax { a: usize, axis: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: S },
    Reshape { a: usize },
    Transpose { a: usize },
    Slice { a: usize, axis: usize, start: usize, len: usize },
    Concat { inputs: Vec<usize>, axis: usize },
    Gather { a: usize, indices: Vec<usize> },
    Dropout { a: usize, mask: Vec<bool>, scale: S },
    RoiPool { fm: usize, taps: Vec<BilinearTap<S>> },
    BceWithLogitsMean { logits: usize, targets: Vec<S> },
    SoftmaxCeMean { logits: usize, classes: Vec<usize> },
    SmoothL1Sum { pred: usize, targets: Vec<S>, beta: S },
}

struct Node<S: Scalar> {
    tensor: Tensor<S>,
    op: Op<S>,
}

/// Record of executed primitive ops plus their output tensors.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    finite_checks: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            finite_checks: true,
        }
    }

    /// Disable per-op output finiteness checks (they are cheap; only tight
    /// benchmark loops want this off).
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.finite_checks = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input tensor. Gradient participation follows
    /// `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor<S>) -> TensorId {
        self.push_node(t, Op::Leaf)
    }

    /// Register an input that never needs a gradient.
    pub fn constant(&mut self, mut t: Tensor<S>) -> TensorId {
        t.requires_grad = false;
        t.grad = None;
        self.push_node(t, Op::Leaf)
    }

    /// Register a trainable input.
    pub fn var(&mut self, mut t: Tensor<S>) -> TensorId {
        t.requires_grad = true;
        self.push_node(t, Op::Leaf)
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor<S> {
        &self.nodes[id.0].tensor
    }

    pub fn data(&self, id: TensorId) -> &[S] {
        self.nodes[id.0].tensor.data()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].tensor.shape()
    }

    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    fn push_node(&mut self, tensor: Tensor<S>, op: Op<S>) -> TensorId {
        if self.finite_checks && !tensor.all_finite() {
            panic!(
                "non-finite values produced by {} (output shape {:?})",
                op_name(&op),
                tensor.shape()
            );
        }
        let id = self.nodes.len();
        self.nodes.push(Node { tensor, op });
        TensorId(id)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<S>, op: Op<S>, inputs: &[usize]) -> TensorId {
        let mut t = Tensor::from_vec(shape, data);
        t.requires_grad = inputs.iter().any(|&i| self.nodes[i].tensor.requires_grad);
        self.push_node(t, op)
    }

    // ── forward ops ──────────────────────────────────────────────────

    /// Matrix product of rank-2 tensors `[r,k] x [k,c] -> [r,c]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
        assert_eq!(ta.shape().len(), 2, "matmul: lhs rank {} != 2", ta.shape().len());
        assert_eq!(tb.shape().len(), 2, "matmul: rhs rank {} != 2", tb.shape().len());
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (k2, n) = (tb.shape()[0], tb.shape()[1]);
        assert_eq!(
            k, k2,
            "matmul: inner extents differ: [{},{}] x [{},{}]",
            m, k, k2, n
        );
        let mut out = vec![S::ZERO; m * n];
        mm_nn(ta.data(), tb.data(), m, k, n, &mut out);
        self.push(vec![m, n], out, Op::Matmul { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    /// 2-D convolution, stride 1, same padding, odd square kernel.
    /// input `[h,w,cin]`, kernel `[kh,kw,cin,cout]`, bias `[cout]`.
    pub fn conv2d(&mut self, input: TensorId, kernel: TensorId, bias: TensorId) -> TensorId {
        let (ti, tk, tb) = (
            &self.nodes[input.0].tensor,
            &self.nodes[kernel.0].tensor,
            &self.nodes[bias.0].tensor,
        );
        assert_eq!(ti.shape().len(), 3, "conv2d: input rank {} != 3", ti.shape().len());
        assert_eq!(tk.shape().len(), 4, "conv2d: kernel rank {} != 4", tk.shape().len());
        let (h, w, cin) = (ti.shape()[0], ti.shape()[1], ti.shape()[2]);
        let (kh, kw, kcin, cout) = (tk.shape()[0], tk.shape()[1], tk.shape()[2], tk.shape()[3]);
        assert_eq!(kh, kw, "conv2d: kernel must be square, got {}x{}", kh, kw);
        assert_eq!(kh % 2, 1, "conv2d: kernel extent {} must be odd", kh);
        assert_eq!(
            kcin, cin,
            "conv2d: kernel cin {} != input channels {}",
            kcin, cin
        );
        assert_eq!(
            tb.shape(),
            &[cout],
            "conv2d: bias shape {:?} != [{}]",
            tb.shape(),
            cout
        );
        let out = conv2d_same(ti.data(), tk.data(), tb.data(), h, w, cin, kh, cout);
        self.push(
            vec![h, w, cout],
            out,
            Op::Conv2d {
                input: input.0,
                kernel: kernel.0,
                bias: bias.0,
            },
            &[input.0, kernel.0, bias.0],
        )
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
        assert_same_shape("add", ta, tb);
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        self.push(ta.shape().to_vec(), data, Op::Add { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
        assert_same_shape("sub", ta, tb);
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x - y)
            .collect();
        self.push(ta.shape().to_vec(), data, Op::Sub { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
        assert_same_shape("mul", ta, tb);
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        self.push(ta.shape().to_vec(), data, Op::Mul { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    pub fn add_scalar(&mut self, a: TensorId, c: S) -> TensorId {
        let ta = &self.nodes[a.0].tensor;
        let data = ta.data().iter().map(|&x| x + c).collect();
        self.push(ta.shape().to_vec(), data, Op::AddScalar { a: a.0 }, &[a.0])
    }

    pub fn mul_scalar(&mut self, a: TensorId, c: S) -> TensorId {
        let ta = &self.nodes[a.0].tensor;
        let data = ta.data().iter().map(|&x| x * c).collect();
        self.push(ta.shape().to_vec(), data, Op::MulScalar { a: a.0, c }, &[a.0])
    }

    /// Add a `[d]` bias to every row of a `[n,d]` tensor.
    pub fn add_bias(&mut self, a: TensorId, bias: TensorId) -> TensorId {
        let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[bias.0].tensor);
        assert_eq!(ta.shape().len(), 2, "add_bias: input rank {} != 2", ta.shape().len());
        let d = ta.shape()[1];
        assert_eq!(
            tb.shape(),
            &[d],
            "add_bias: bias shape {:?} != [{}]",
            tb.shape(),
            d
        );
        let bd = tb.data();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % d])
            .collect();
        self.push(
            ta.shape().to_vec(),
            data,
            Op::AddBias { a: a.0, bias: bias.0 },
            &[a.0, bias.0],
        )
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let ta = &self.nodes[a.0].tensor;
        let data = ta.data().iter().map(|&x| x.maxs(S::ZERO)).collect();
        self.push(ta.shape().to_vec(), data, Op::Relu { a: a.0 }, &[a.0])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let ta = &self.nodes[a.0].tensor;
        let data = ta.data().iter().map(|&x| gelu_fwd(x)).collect();
        self.push(ta.shape().to_vec(), data, Op::Gelu { a: a.0 }, &[a.0])
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let ta = &self.nodes[a.0].tensor;
        let data = ta.data().iter().map(|&x| sigmoid_fwd(x)).collect();
        self.push(ta.shape().to_vec(), data, Op::Sigmoid { a: a.0 }, &[a.0])
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        let ta = &self.nodes[a.0].tensor;
        let data = ta.data().iter().map(|&x| x.exp()).collect();
        self.push(ta.shape().to_vec(), data, Op::Exp { a: a.0 }, &[a.0])
    }

    pub fn log(&mut self, a: TensorId) -> TensorId {
        let ta = &self.nodes[a.0].tensor;
        let data = ta.data().iter().map(|&x| x.ln()).collect();
        self.push(ta.shape().to_vec(), data, Op::Log { a: a.0 }, &[a.0])
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let ta = &self.nodes[a.0].tensor;
        let mut s = S::ZERO;
        for &x in ta.data() {
            s += x;
        }
        self.push(vec![1], vec![s], Op::SumAll { a: a.0 }, &[a.0])
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let ta = &self.nodes[a.0].tensor;
        let n = S::from_f64(ta.numel() as f64);
        let mut s = S::ZERO;
        for &x in ta.data() {
            s += x;
        }
        self.push(vec![1], vec![s / n], Op::MeanAll { a: a.0 }, &[a.0])
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> TensorId {
        let ta = &self.nodes[a.0].tensor;
        let shape = ta.shape().to_vec();
        assert!(
            axis < shape.len(),
            "softmax: axis {} out of range for shape {:?}",
            axis,
            shape
        );
        let data = softmax_fwd(ta.data(), &shape, axis);
        self.push(shape, data, Op::Softmax { a: a.0, axis }, &[a.0])
    }

    /// Layer normalization of each row of a `[n,d]` tensor, then affine by
    /// `gamma`/`beta` of shape `[d]`.
    pub fn layernorm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, eps: S) -> TensorId {
        let (tx, tg, tb) = (
            &self.nodes[x.0].tensor,
            &self.nodes[gamma.0].tensor,
            &self.nodes[beta.0].tensor,
        );
        assert_eq!(tx.shape().len(), 2, "layernorm: input rank {} != 2", tx.shape().len());
        let d = tx.shape()[1];
        assert_eq!(tg.shape(), &[d], "layernorm: gamma shape {:?} != [{}]", tg.shape(), d);
        assert_eq!(tb.shape(), &[d], "layernorm: beta shape {:?} != [{}]", tb.shape(), d);
        assert!(eps > S::ZERO, "layernorm: eps must be positive");
        let n = tx.shape()[0];
        let mut out = vec![S::ZERO; n * d];
        let dd = S::from_f64(d as f64);
        for r in 0..n {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mut mean = S::ZERO;
            for &v in row {
                mean += v;
            }
            mean = mean / dd;
            let mut var = S::ZERO;
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            var = var / dd;
            let inv_std = S::ONE / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * inv_std * tg.data()[j] + tb.data()[j];
            }
        }
        self.push(
            tx.shape().to_vec(),
            out,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
            },
            &[x.0, gamma.0, beta.0],
        )
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> TensorId {
        let ta = &self.nodes[a.0].tensor;
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            ta.numel(),
            "reshape: {:?} -> {:?} changes element count",
            ta.shape(),
            shape
        );
        let data = ta.data().to_vec();
        self.push(shape, data, Op::Reshape { a: a.0 }, &[a.0])
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, a: TensorId) -> TensorId {
        let ta = &self.nodes[a.0].tensor;
        assert_eq!(ta.shape().len(), 2, "transpose: rank {} != 2", ta.shape().len());
        let (r, c) = (ta.shape()[0], ta.shape()[1]);
        let src = ta.data();
        let mut out = vec![S::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(vec![c, r], out, Op::Transpose { a: a.0 }, &[a.0])
    }

    /// Copy `len` consecutive positions starting at `start` along `axis`.
    pub fn slice(&mut self, a: TensorId, axis: usize, start: usize, len: usize) -> TensorId {
        let ta = &self.nodes[a.0].tensor;
        let shape = ta.shape().to_vec();
        assert!(
            axis < shape.len(),
            "slice: axis {} out of range for shape {:?}",
            axis,
            shape
        );
        assert!(
            start + len <= shape[axis] && len > 0,
            "slice: range {}..{} out of bounds for axis extent {}",
            start,
            start + len,
            shape[axis]
        );
        let (outer, axis_len, inner) = split_at_axis(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut out = Vec::with_capacity(outer * len * inner);
        let src = ta.data();
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        self.push(
            out_shape,
            out,
            Op::Slice {
                a: a.0,
                axis,
                start,
                len,
            },
            &[a.0],
        )
    }

    /// Concatenate along `axis`; all other extents must match.
    pub fn concat(&mut self, inputs: &[TensorId], axis: usize) -> TensorId {
        assert!(!inputs.is_empty(), "concat: no inputs");
        let first_shape = self.nodes[inputs[0].0].tensor.shape().to_vec();
        assert!(
            axis < first_shape.len(),
            "concat: axis {} out of range for shape {:?}",
            axis,
            first_shape
        );
        let mut total_axis = 0usize;
        for id in inputs {
            let s = self.nodes[id.0].tensor.shape();
            assert_eq!(
                s.len(),
                first_shape.len(),
                "concat: rank mismatch {:?} vs {:?}",
                s,
                first_shape
            );
            for (ax, (&se, &fe)) in s.iter().zip(&first_shape).enumerate() {
                assert!(
                    ax == axis || se == fe,
                    "concat: extent mismatch at axis {}: {:?} vs {:?}",
                    ax,
                    s,
                    first_shape
                );
            }
            total_axis += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&first_shape, axis);
        let mut out_shape = first_shape.clone();
        out_shape[axis] = total_axis;
        let mut out = vec![S::ZERO; outer * total_axis * inner];
        let mut offset = 0usize;
        for id in inputs {
            let t = &self.nodes[id.0].tensor;
            let alen = t.shape()[axis];
            let src = t.data();
            for o in 0..outer {
                let dst = (o * total_axis + offset) * inner;
                let sb = o * alen * inner;
                out[dst..dst + alen * inner].copy_from_slice(&src[sb..sb + alen * inner]);
            }
            offset += alen;
        }
        let in_ids: Vec<usize> = inputs.iter().map(|i| i.0).collect();
        let deps = in_ids.clone();
        self.push(out_shape, out, Op::Concat { inputs: in_ids, axis }, &deps)
    }

    /// Select elements by flat index; output is 1-D.
    pub fn gather(&mut self, a: TensorId, indices: Vec<usize>) -> TensorId {
        assert!(!indices.is_empty(), "gather: empty index list");
        let ta = &self.nodes[a.0].tensor;
        let n = ta.numel();
        let src = ta.data();
        let data: Vec<S> = indices
            .iter()
            .map(|&i| {
                assert!(i < n, "gather: index {} out of bounds for numel {}", i, n);
                src[i]
            })
            .collect();
        let len = data.len();
        self.push(vec![len], data, Op::Gather { a: a.0, indices }, &[a.0])
    }

    /// Inverted-dropout with an externally drawn keep mask.
    pub fn dropout(&mut self, a: TensorId, mask: Vec<bool>, keep_prob: f64) -> TensorId {
        let ta = &self.nodes[a.0].tensor;
        assert_eq!(
            mask.len(),
            ta.numel(),
            "dropout: mask length {} != numel {}",
            mask.len(),
            ta.numel()
        );
        assert!(keep_prob > 0.0 && keep_prob <= 1.0, "dropout: keep_prob out of (0,1]");
        let scale = S::from_f64(1.0 / keep_prob);
        let data = ta
            .data()
            .iter()
            .zip(&mask)
            .map(|(&x, &keep)| if keep { x * scale } else { S::ZERO })
            .collect();
        self.push(
            ta.shape().to_vec(),
            data,
            Op::Dropout { a: a.0, mask, scale },
            &[a.0],
        )
    }

    /// Bilinear pooling of a `[g,g,d]` feature map at `q*q` precomputed taps.
    /// Each tap indexes cells of the map flattened to `[g*g, d]`.
    pub fn roi_pool(&mut self, fm: TensorId, taps: Vec<BilinearTap<S>>, q: usize) -> TensorId {
        let tf = &self.nodes[fm.0].tensor;
        assert_eq!(tf.shape().len(), 3, "roi_pool: feature map rank {} != 3", tf.shape().len());
        let (g0, g1, d) = (tf.shape()[0], tf.shape()[1], tf.shape()[2]);
        let cells = g0 * g1;
        assert_eq!(
            taps.len(),
            q * q,
            "roi_pool: {} taps for output {}x{}",
            taps.len(),
            q,
            q
        );
        let src = tf.data();
        let mut out = vec![S::ZERO; q * q * d];
        for (p, tap) in taps.iter().enumerate() {
            for &(cell, w) in tap {
                assert!(cell < cells, "roi_pool: tap cell {} out of {}", cell, cells);
                let sb = cell * d;
                let ob = p * d;
                for c in 0..d {
                    out[ob + c] += w * src[sb + c];
                }
            }
        }
        self.push(vec![q, q, d], out, Op::RoiPool { fm: fm.0, taps }, &[fm.0])
    }

    /// Mean binary cross-entropy over a 1-D logit vector, numerically
    /// stable form.
    pub fn bce_with_logits_mean(&mut self, logits: TensorId, targets: Vec<S>) -> TensorId {
        let tl = &self.nodes[logits.0].tensor;
        assert_eq!(
            tl.numel(),
            targets.len(),
            "bce: {} logits vs {} targets",
            tl.numel(),
            targets.len()
        );
        assert!(!targets.is_empty(), "bce: empty target set");
        let n = S::from_f64(targets.len() as f64);
        let mut s = S::ZERO;
        for (&x, &t) in tl.data().iter().zip(&targets) {
            // max(x,0) - x t + ln(1 + exp(-|x|))
            s += x.maxs(S::ZERO) - x * t + (S::ONE + (-x.abs()).exp()).ln();
        }
        self.push(
            vec![1],
            vec![s / n],
            Op::BceWithLogitsMean {
                logits: logits.0,
                targets,
            },
            &[logits.0],
        )
    }

    /// Mean cross-entropy of `[n, c]` logits against integer class targets.
    pub fn softmax_ce_mean(&mut self, logits: TensorId, classes: Vec<usize>) -> TensorId {
        let tl = &self.nodes[logits.0].tensor;
        assert_eq!(tl.shape().len(), 2, "softmax_ce: logits rank {} != 2", tl.shape().len());
        let (n, c) = (tl.shape()[0], tl.shape()[1]);
        assert_eq!(classes.len(), n, "softmax_ce: {} rows vs {} targets", n, classes.len());
        assert!(n > 0, "softmax_ce: empty batch");
        let mut s = S::ZERO;
        for (r, &cls) in classes.iter().enumerate() {
            assert!(cls < c, "softmax_ce: class {} out of {}", cls, c);
            let row = &tl.data()[r * c..(r + 1) * c];
            let mut mx = row[0];
            for &v in row {
                mx = mx.maxs(v);
            }
            let mut lse = S::ZERO;
            for &v in row {
                lse += (v - mx).exp();
            }
            s += mx + lse.ln() - row[cls];
        }
        let nn = S::from_f64(n as f64);
        self.push(
            vec![1],
            vec![s / nn],
            Op::SoftmaxCeMean {
                logits: logits.0,
                classes,
            },
            &[logits.0],
        )
    }

    /// Summed smooth-L1 between a tensor and fixed targets, transition at
    /// `beta`.
    pub fn smooth_l1_sum(&mut self, pred: TensorId, targets: Vec<S>, beta: S) -> TensorId {
        let tp = &self.nodes[pred.0].tensor;
        assert_eq!(
            tp.numel(),
            targets.len(),
            "smooth_l1: {} predictions vs {} targets",
            tp.numel(),
            targets.len()
        );
        assert!(beta > S::ZERO, "smooth_l1: beta must be positive");
        let half = S::from_f64(0.5);
        let mut s = S::ZERO;
        for (&p, &t) in tp.data().iter().zip(&targets) {
            let d = (p - t).abs();
            if d < beta {
                s += half * d * d / beta;
            } else {
                s += d - half * beta;
            }
        }
        self.push(
            vec![1],
            vec![s],
            Op::SmoothL1Sum {
                pred: pred.0,
                targets,
                beta,
            },
            &[pred.0],
        )
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Populates `grad` on every
    /// node with `requires_grad`, visiting each recorded op exactly once.
    pub fn backward(&mut self, loss: TensorId) {
        assert_eq!(
            self.nodes[loss.0].tensor.numel(),
            1,
            "backward: loss must be scalar, got shape {:?}",
            self.nodes[loss.0].tensor.shape()
        );
        for node in &mut self.nodes {
            if node.tensor.requires_grad && node.tensor.grad.is_none() {
                node.tensor.grad = Some(vec![S::ZERO; node.tensor.numel()]);
            }
        }
        if !self.nodes[loss.0].tensor.requires_grad {
            return; // nothing upstream wants a gradient
        }
        if let Some(g) = self.nodes[loss.0].tensor.grad.as_mut() {
            g[0] = S::ONE;
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tensor.requires_grad {
                continue;
            }
            let grad = match self.nodes[i].tensor.grad.clone() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            self.backprop_node(i, &grad, &op);
        }
    }

    fn acc(&mut self, node: usize, delta: &[S]) {
        if !self.nodes[node].tensor.requires_grad {
            return;
        }
        let g = self.nodes[node]
            .tensor
            .grad
            .as_mut()
            .expect("gradient buffer allocated at backward start");
        for (a, &d) in g.iter_mut().zip(delta) {
            *a += d;
        }
    }

    fn backprop_node(&mut self, i: usize, grad: &[S], op: &Op<S>) {
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, n) = {
                    let s = self.nodes[i].tensor.shape();
                    (s[0], s[1])
                };
                let k = self.nodes[*a].tensor.shape()[1];
                if self.nodes[*a].tensor.requires_grad {
                    let mut da = vec![S::ZERO; m * k];
                    mm_nt(grad, self.nodes[*b].tensor.data(), m, n, k, &mut da);
                    self.acc(*a, &da);
                }
                if self.nodes[*b].tensor.requires_grad {
                    let mut db = vec![S::ZERO; k * n];
                    mm_tn(self.nodes[*a].tensor.data(), grad, m, k, n, &mut db);
                    self.acc(*b, &db);
                }
            }
            Op::Conv2d { input, kernel, bias } => {
                let (h, w, cin) = {
                    let s = self.nodes[*input].tensor.shape();
                    (s[0], s[1], s[2])
                };
                let (kh, cout) = {
                    let s = self.nodes[*kernel].tensor.shape();
                    (s[0], s[3])
                };
                if self.nodes[*input].tensor.requires_grad {
                    let din = conv2d_grad_input(
                        grad,
                        self.nodes[*kernel].tensor.data(),
                        h,
                        w,
                        cin,
                        kh,
                        cout,
                    );
                    self.acc(*input, &din);
                }
                if self.nodes[*kernel].tensor.requires_grad {
                    let dk = conv2d_grad_kernel(
                        grad,
                        self.nodes[*input].tensor.data(),
                        h,
                        w,
                        cin,
                        kh,
                        cout,
                    );
                    self.acc(*kernel, &dk);
                }
                if self.nodes[*bias].tensor.requires_grad {
                    let mut db = vec![S::ZERO; cout];
                    for px in 0..h * w {
                        for c in 0..cout {
                            db[c] += grad[px * cout + c];
                        }
                    }
                    self.acc(*bias, &db);
                }
            }
            Op::Add { a, b } => {
                self.acc(*a, grad);
                self.acc(*b, grad);
            }
            Op::Sub { a, b } => {
                self.acc(*a, grad);
                if self.nodes[*b].tensor.requires_grad {
                    let neg: Vec<S> = grad.iter().map(|&g| -g).collect();
                    self.acc(*b, &neg);
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[*a].tensor.requires_grad {
                    let da: Vec<S> = grad
                        .iter()
                        .zip(self.nodes[*b].tensor.data())
                        .map(|(&g, &y)| g * y)
                        .collect();
                    self.acc(*a, &da);
                }
                if self.nodes[*b].tensor.requires_grad {
                    let db: Vec<S> = grad
                        .iter()
                        .zip(self.nodes[*a].tensor.data())
                        .map(|(&g, &x)| g * x)
                        .collect();
                    self.acc(*b, &db);
                }
            }
            Op::AddScalar { a } => self.acc(*a, grad),
            Op::MulScalar { a, c } => {
                if self.nodes[*a].tensor.requires_grad {
                    let da: Vec<S> = grad.iter().map(|&g| g * *c).collect();
                    self.acc(*a, &da);
                }
            }
            Op::AddBias { a, bias } => {
                self.acc(*a, grad);
                if self.nodes[*bias].tensor.requires_grad {
                    let d = self.nodes[*bias].tensor.numel();
                    let mut db = vec![S::ZERO; d];
                    for (idx, &g) in grad.iter().enumerate() {
                        db[idx % d] += g;
                    }
                    self.acc(*bias, &db);
                }
            }
            Op::Relu { a } => {
                if self.nodes[*a].tensor.requires_grad {
                    let da: Vec<S> = grad
                        .iter()
                        .zip(self.nodes[*a].tensor.data())
                        .map(|(&g, &x)| if x > S::ZERO { g } else { S::ZERO })
                        .collect();
                    self.acc(*a, &da);
                }
            }
            Op::Gelu { a } => {
                if self.nodes[*a].tensor.requires_grad {
                    let da: Vec<S> = grad
                        .iter()
                        .zip(self.nodes[*a].tensor.data())
                        .map(|(&g, &x)| g * gelu_bwd(x))
                        .collect();
                    self.acc(*a, &da);
                }
            }
            Op::Sigmoid { a } => {
                if self.nodes[*a].tensor.requires_grad {
                    let da: Vec<S> = grad
                        .iter()
                        .zip(self.nodes[i].tensor.data())
                        .map(|(&g, &y)| g * y * (S::ONE - y))
                        .collect();
                    self.acc(*a, &da);
                }
            }
            Op::Exp { a } => {
                if self.nodes[*a].tensor.requires_grad {
                    let da: Vec<S> = grad
                        .iter()
                        .zip(self.nodes[i].tensor.data())
                        .map(|(&g, &y)| g * y)
                        .collect();
                    self.acc(*a, &da);
                }
            }
            Op::Log { a } => {
                if self.nodes[*a].tensor.requires_grad {
                    let da: Vec<S> = grad
                        .iter()
                        .zip(self.nodes[*a].tensor.data())
                        .map(|(&g, &x)| g / x)
                        .collect();
                    self.acc(*a, &da);
                }
            }
            Op::SumAll { a } => {
                if self.nodes[*a].tensor.requires_grad {
                    let da = vec![grad[0]; self.nodes[*a].tensor.numel()];
                    self.acc(*a, &da);
                }
            }
            Op::MeanAll { a } => {
                if self.nodes[*a].tensor.requires_grad {
                    let n = self.nodes[*a].tensor.numel();
                    let g = grad[0] / S::from_f64(n as f64);
                    let da = vec![g; n];
                    self.acc(*a, &da);
                }
            }
            Op::Softmax { a, axis } => {
                if self.nodes[*a].tensor.requires_grad {
                    let y = self.nodes[i].tensor.data();
                    let shape = self.nodes[i].tensor.shape();
                    let (outer, alen, inner) = split_at_axis(shape, *axis);
                    let mut da = vec![S::ZERO; y.len()];
                    for o in 0..outer {
                        for ii in 0..inner {
                            let mut dot = S::ZERO;
                            for j in 0..alen {
                                let f = (o * alen + j) * inner + ii;
                                dot += grad[f] * y[f];
                            }
                            for j in 0..alen {
                                let f = (o * alen + j) * inner + ii;
                                da[f] = y[f] * (grad[f] - dot);
                            }
                        }
                    }
                    self.acc(*a, &da);
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (n, d) = {
                    let s = self.nodes[*x].tensor.shape();
                    (s[0], s[1])
                };
                let dd = S::from_f64(d as f64);
                let xd = self.nodes[*x].tensor.data().to_vec();
                let gd = self.nodes[*gamma].tensor.data().to_vec();
                let mut dx = vec![S::ZERO; n * d];
                let mut dgamma = vec![S::ZERO; d];
                let mut dbeta = vec![S::ZERO; d];
                for r in 0..n {
                    let row = &xd[r * d..(r + 1) * d];
                    let grow = &grad[r * d..(r + 1) * d];
                    let mut mean = S::ZERO;
                    for &v in row {
                        mean += v;
                    }
                    mean = mean / dd;
                    let mut var = S::ZERO;
                    for &v in row {
                        var += (v - mean) * (v - mean);
                    }
                    var = var / dd;
                    let inv_std = S::ONE / (var + *eps).sqrt();
                    let xhat: Vec<S> = row.iter().map(|&v| (v - mean) * inv_std).collect();
                    let mut dxhat_sum = S::ZERO;
                    let mut dxhat_xhat = S::ZERO;
                    for j in 0..d {
                        let dxh = grow[j] * gd[j];
                        dgamma[j] += grow[j] * xhat[j];
                        dbeta[j] += grow[j];
                        dxhat_sum += dxh;
                        dxhat_xhat += dxh * xhat[j];
                    }
                    for j in 0..d {
                        let dxh = grow[j] * gd[j];
                        dx[r * d + j] = inv_std / dd * (dd * dxh - dxhat_sum - xhat[j] * dxhat_xhat);
                    }
                }
                self.acc(*x, &dx);
                self.acc(*gamma, &dgamma);
                self.acc(*beta, &dbeta);
            }
            Op::Reshape { a } => self.acc(*a, grad),
            Op::Transpose { a } => {
                if self.nodes[*a].tensor.requires_grad {
                    let (r, c) = {
                        let s = self.nodes[i].tensor.shape();
                        (s[0], s[1])
                    };
                    let mut da = vec![S::ZERO; r * c];
                    for x in 0..r {
                        for y in 0..c {
                            da[y * r + x] = grad[x * c + y];
                        }
                    }
                    self.acc(*a, &da);
                }
            }
            Op::Slice { a, axis, start, len } => {
                if self.nodes[*a].tensor.requires_grad {
                    let in_shape = self.nodes[*a].tensor.shape().to_vec();
                    let (outer, alen, inner) = split_at_axis(&in_shape, *axis);
                    let mut da = vec![S::ZERO; self.nodes[*a].tensor.numel()];
                    for o in 0..outer {
                        let dst = (o * alen + start) * inner;
                        let src = o * len * inner;
                        for t in 0..len * inner {
                            da[dst + t] += grad[src + t];
                        }
                    }
                    self.acc(*a, &da);
                }
            }
            Op::Concat { inputs, axis } => {
                let out_shape = self.nodes[i].tensor.shape().to_vec();
                let (outer, total, inner) = split_at_axis(&out_shape, *axis);
                let mut offset = 0usize;
                for &inp in inputs {
                    let alen = self.nodes[inp].tensor.shape()[*axis];
                    if self.nodes[inp].tensor.requires_grad {
                        let mut da = vec![S::ZERO; self.nodes[inp].tensor.numel()];
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * alen * inner;
                            for t in 0..alen * inner {
                                da[dst + t] = grad[src + t];
                            }
                        }
                        self.acc(inp, &da);
                    }
                    offset += alen;
                }
            }
            Op::Gather { a, indices } => {
                if self.nodes[*a].tensor.requires_grad {
                    let mut da = vec![S::ZERO; self.nodes[*a].tensor.numel()];
                    for (pos, &idx) in indices.iter().enumerate() {
                        da[idx] += grad[pos];
                    }
                    self.acc(*a, &da);
                }
            }
            Op::Dropout { a, mask, scale } => {
                if self.nodes[*a].tensor.requires_grad {
                    let da: Vec<S> = grad
                        .iter()
                        .zip(mask)
                        .map(|(&g, &keep)| if keep { g * *scale } else { S::ZERO })
                        .collect();
                    self.acc(*a, &da);
                }
            }
            Op::RoiPool { fm, taps } => {
                if self.nodes[*fm].tensor.requires_grad {
                    let d = self.nodes[*fm].tensor.shape()[2];
                    let mut da = vec![S::ZERO; self.nodes[*fm].tensor.numel()];
                    for (p, tap) in taps.iter().enumerate() {
                        for &(cell, w) in tap {
                            for c in 0..d {
                                da[cell * d + c] += w * grad[p * d + c];
                            }
                        }
                    }
                    self.acc(*fm, &da);
                }
            }
            Op::BceWithLogitsMean { logits, targets } => {
                if self.nodes[*logits].tensor.requires_grad {
                    let n = S::from_f64(targets.len() as f64);
                    let da: Vec<S> = self.nodes[*logits]
                        .tensor
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(&x, &t)| grad[0] * (sigmoid_fwd(x) - t) / n)
                        .collect();
                    self.acc(*logits, &da);
                }
            }
            Op::SoftmaxCeMean { logits, classes } => {
                if self.nodes[*logits].tensor.requires_grad {
                    let (n, c) = {
                        let s = self.nodes[*logits].tensor.shape();
                        (s[0], s[1])
                    };
                    let nn = S::from_f64(n as f64);
                    let ld = self.nodes[*logits].tensor.data().to_vec();
                    let mut da = vec![S::ZERO; n * c];
                    for (r, &cls) in classes.iter().enumerate() {
                        let row = &ld[r * c..(r + 1) * c];
                        let mut mx = row[0];
                        for &v in row {
                            mx = mx.maxs(v);
                        }
                        let mut lse = S::ZERO;
                        for &v in row {
                            lse += (v - mx).exp();
                        }
                        for j in 0..c {
                            let p = (row[j] - mx).exp() / lse;
                            let ind = if j == cls { S::ONE } else { S::ZERO };
                            da[r * c + j] = grad[0] * (p - ind) / nn;
                        }
                    }
                    self.acc(*logits, &da);
                }
            }
            Op::SmoothL1Sum { pred, targets, beta } => {
                if self.nodes[*pred].tensor.requires_grad {
                    let da: Vec<S> = self.nodes[*pred]
                        .tensor
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(&p, &t)| {
                            let d = p - t;
                            let slope = if d.abs() < *beta {
                                d / *beta
                            } else if d > S::ZERO {
                                S::ONE
                            } else {
                                -S::ONE
                            };
                            grad[0] * slope
                        })
                        .collect();
                    self.acc(*pred, &da);
                }
            }
        }
    }
}

fn op_name<S: Scalar>(op: &Op<S>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Matmul { .. } => "matmul",
        Op::Conv2d { .. } => "conv2d",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::AddScalar { .. } => "add_scalar",
        Op::MulScalar { .. } => "mul_scalar",
        Op::AddBias { .. } => "add_bias",
        Op::Relu { .. } => "relu",
        Op::Gelu { .. } => "gelu",
        Op::Sigmoid { .. } => "sigmoid",
        Op::Exp { .. } => "exp",
        Op::Log { .. } => "log",
        Op::SumAll { .. } => "sum",
        Op::MeanAll { .. } => "mean",
        Op::Softmax { .. } => "softmax",
        Op::LayerNorm { .. } => "layernorm",
        Op::Reshape { .. } => "reshape",
        Op::Transpose { .. } => "transpose",
        Op::Slice { .. } => "slice",
        Op::Concat { .. } => "concat",
        Op::Gather { .. } => "gather",
        Op::Dropout { .. } => "dropout",
        Op::RoiPool { .. } => "roi_pool",
        Op::BceWithLogitsMean { .. } => "bce_with_logits",
        Op::SoftmaxCeMean { .. } => "softmax_cross_entropy",
        Op::SmoothL1Sum { .. } => "smooth_l1",
    }
}

/// Shape decomposition `[outer, shape[axis], inner]` around one axis.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid_fwd<S: Scalar>(x: S) -> S {
    // split on sign so exp never overflows
    if x >= S::ZERO {
        S::ONE / (S::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::ONE + e)
    }
}

fn gelu_fwd<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let k = S::from_f64(0.044_715);
    let half = S::from_f64(0.5);
    half * x * (S::ONE + (c * (x + k * x * x * x)).tanh())
}

fn gelu_bwd<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.797_884_560_802_865_4);
    let k = S::from_f64(0.044_715);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let sech2 = S::ONE - t * t;
    let dinner = c * (S::ONE + three * k * x * x);
    half * (S::ONE + t) + half * x * sech2 * dinner
}

fn softmax_fwd<S: Scalar>(data: &[S], shape: &[usize], axis: usize) -> Vec<S> {
    let (outer, alen, inner) = split_at_axis(shape, axis);
    let mut out = vec![S::ZERO; data.len()];
    for o in 0..outer {
        for ii in 0..inner {
            let mut mx = data[(o * alen) * inner + ii];
            for j in 1..alen {
                mx = mx.maxs(data[(o * alen + j) * inner + ii]);
            }
            let mut sum = S::ZERO;
            for j in 0..alen {
                let f = (o * alen + j) * inner + ii;
                let e = (data[f] - mx).exp();
                out[f] = e;
                sum += e;
            }
            for j in 0..alen {
                let f = (o * alen + j) * inner + ii;
                out[f] = out[f] / sum;
            }
        }
    }
    out
}

// work threshold below which the matmul kernels stay single-threaded
const PAR_FLOPS: usize = 1 << 18;

/// C += A[m,k] * B[k,n]. Row-parallel; each output row is accumulated in a
/// fixed sequential order so results are identical at any thread count.
pub fn mm_nn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    let row_job = |(i, out_row): (usize, &mut [S])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..kk * n + n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_FLOPS && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row_job);
    } else {
        out.chunks_mut(n).enumerate().for_each(row_job);
    }
}

/// C += A[m,n] * B^T where B is `[k,n]`; result is `[m,k]`.
fn mm_nt<S: Scalar>(a: &[S], b: &[S], m: usize, n: usize, k: usize, out: &mut [S]) {
    let row_job = |(i, out_row): (usize, &mut [S])| {
        let a_row = &a[i * n..(i + 1) * n];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * n..j * n + n];
            let mut s = S::ZERO;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                s += av * bv;
            }
            *o += s;
        }
    };
    if m * n * k >= PAR_FLOPS && m > 1 {
        out.par_chunks_mut(k).enumerate().for_each(row_job);
    } else {
        out.chunks_mut(k).enumerate().for_each(row_job);
    }
}

/// C += A^T * B where A is `[m,k]` and B is `[m,n]`; result is `[k,n]`.
fn mm_tn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    let row_job = |(kk, out_row): (usize, &mut [S])| {
        for i in 0..m {
            let av = a[i * k + kk];
            let b_row = &b[i * n..i * n + n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_FLOPS && k > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row_job);
    } else {
        out.chunks_mut(n).enumerate().for_each(row_job);
    }
}

fn conv2d_same<S: Scalar>(
    input: &[S],
    kernel: &[S],
    bias: &[S],
    h: usize,
    w: usize,
    cin: usize,
    kext: usize,
    cout: usize,
) -> Vec<S> {
    let pad = kext / 2;
    let mut out = vec![S::ZERO; h * w * cout];
    let row_job = |(y, out_plane): (usize, &mut [S])| {
        for x in 0..w {
            let o = &mut out_plane[x * cout..(x + 1) * cout];
            o.copy_from_slice(bias);
            for dy in 0..kext {
                let yy = y + dy;
                if yy < pad || yy >= h + pad {
                    continue;
                }
                let yy = yy - pad;
                for dx in 0..kext {
                    let xx = x + dx;
                    if xx < pad || xx >= w + pad {
                        continue;
                    }
                    let xx = xx - pad;
                    let in_base = (yy * w + xx) * cin;
                    let k_base = (dy * kext + dx) * cin * cout;
                    for ci in 0..cin {
                        let iv = input[in_base + ci];
                        let k_row = &kernel[k_base + ci * cout..k_base + (ci + 1) * cout];
                        for (ov, &kv) in o.iter_mut().zip(k_row) {
                            *ov += iv * kv;
                        }
                    }
                }
            }
        }
    };
    if h * w * cin * cout * kext * kext >= PAR_FLOPS && h > 1 {
        out.par_chunks_mut(w * cout).enumerate().for_each(row_job);
    } else {
        out.chunks_mut(w * cout).enumerate().for_each(row_job);
    }
    out
}

fn conv2d_grad_input<S: Scalar>(
    grad: &[S],
    kernel: &[S],
    h: usize,
    w: usize,
    cin: usize,
    kext: usize,
    cout: usize,
) -> Vec<S> {
    let pad = kext / 2;
    let mut din = vec![S::ZERO; h * w * cin];
    // din[yy,xx,ci] = sum over output positions whose window covers (yy,xx)
    let row_job = |(yy, din_plane): (usize, &mut [S])| {
        for xx in 0..w {
            let d = &mut din_plane[xx * cin..(xx + 1) * cin];
            for dy in 0..kext {
                // output y with input yy at kernel offset dy: y = yy - dy + pad
                let y = yy + pad;
                if y < dy {
                    continue;
                }
                let y = y - dy;
                if y >= h {
                    continue;
                }
                for dx in 0..kext {
                    let x = xx + pad;
                    if x < dx {
                        continue;
                    }
                    let x = x - dx;
                    if x >= w {
                        continue;
                    }
                    let g_base = (y * w + x) * cout;
                    let k_base = (dy * kext + dx) * cin * cout;
                    for (ci, dv) in d.iter_mut().enumerate() {
                        let k_row = &kernel[k_base + ci * cout..k_base + (ci + 1) * cout];
                        let g_row = &grad[g_base..g_base + cout];
                        let mut s = S::ZERO;
                        for (&kv, &gv) in k_row.iter().zip(g_row) {
                            s += kv * gv;
                        }
                        *dv += s;
                    }
                }
            }
        }
    };
    if h * w * cin * cout * kext * kext >= PAR_FLOPS && h > 1 {
        din.par_chunks_mut(w * cin).enumerate().for_each(row_job);
    } else {
        din.chunks_mut(w * cin).enumerate().for_each(row_job);
    }
    din
}

fn conv2d_grad_kernel<S: Scalar>(
    grad: &[S],
    input: &[S],
    h: usize,
    w: usize,
    cin: usize,
    kext: usize,
    cout: usize,
) -> Vec<S> {
    let pad = kext / 2;
    let mut dk = vec![S::ZERO; kext * kext * cin * cout];
    for y in 0..h {
        for x in 0..w {
            let g_base = (y * w + x) * cout;
            for dy in 0..kext {
                let yy = y + dy;
                if yy < pad || yy >= h + pad {
                    continue;
                }
                let yy = yy - pad;
                for dx in 0..kext {
                    let xx = x + dx;
                    if xx < pad || xx >= w + pad {
                        continue;
                    }
                    let xx = xx - pad;
                    let in_base = (yy * w + xx) * cin;
                    let k_base = (dy * kext + dx) * cin * cout;
                    for ci in 0..cin {
                        let iv = input[in_base + ci];
                        let dk_row = &mut dk[k_base + ci * cout..k_base + (ci + 1) * cout];
                        let g_row = &grad[g_base..g_base + cout];
                        for (dv, &gv) in dk_row.iter_mut().zip(g_row) {
                            *dv += iv * gv;
                        }
                    }
                }
            }
        }
    }
    dk
}
