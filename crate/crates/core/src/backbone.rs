//! Backbone: overlapping-patch tokenizer, linear embedding with class token
//! and learned positional encoding, pre-LN transformer encoder, and
//! reassembly of patch tokens into a square feature map refined by residual
//! convolution blocks.
//!
//! Adjacent patches share `overlap` pixels, so the window stride is
//! `patch_size - overlap`. Exact divisibility is required instead of
//! padding, which keeps the token grid square.

use crate::params::{init_he_conv, init_trunc_normal, ParamId, ParamStore, TapeParams};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tape, Tensor, TensorId};
use serde::{Deserialize, Serialize};

/// Geometry of the overlapping-patch tokenizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch_size: usize,
    /// Pixels shared between adjacent patches; stride = patch_size - overlap.
    pub overlap: usize,
}

impl PatchConfig {
    pub fn square(image_size: usize, channels: usize, patch_size: usize, overlap: usize) -> Self {
        PatchConfig {
            height: image_size,
            width: image_size,
            channels,
            patch_size,
            overlap,
        }
    }

    pub fn stride(&self) -> usize {
        self.patch_size - self.overlap
    }

    /// Patch windows per side of the (square) grid.
    pub fn patches_per_side(&self) -> usize {
        (self.height - self.patch_size) / self.stride() + 1
    }

    /// Total patch count n = patches_per_side^2.
    pub fn num_patches(&self) -> usize {
        let g = self.patches_per_side();
        g * g
    }

    /// Flattened patch length P*P*C.
    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn validate(&self) -> Result<(), String> {
        let (h, w, p, m) = (self.height, self.width, self.patch_size, self.overlap);
        if self.channels == 0 {
            return Err("channels must be positive".into());
        }
        if p == 0 || p > h.min(w) {
            return Err(format!(
                "patch_size P={} must satisfy 0 < P <= min(H={}, W={})",
                p, h, w
            ));
        }
        if m >= p {
            return Err(format!("overlap m={} must satisfy 0 <= m < P={}", m, p));
        }
        let stride = p - m;
        if (h - p) % stride != 0 {
            return Err(format!(
                "image height H={} is not tileable: (H - P) = {} not divisible by stride P - m = {} (P={}, m={})",
                h,
                h - p,
                stride,
                p,
                m
            ));
        }
        if (w - p) % stride != 0 {
            return Err(format!(
                "image width W={} is not tileable: (W - P) = {} not divisible by stride P - m = {} (P={}, m={})",
                w,
                w - p,
                stride,
                p,
                m
            ));
        }
        if (h - p) / stride != (w - p) / stride {
            return Err(format!(
                "patch grid must be square: H={} and W={} give {}x{} windows (P={}, m={})",
                h,
                w,
                (h - p) / stride + 1,
                (w - p) / stride + 1,
                p,
                m
            ));
        }
        Ok(())
    }
}

/// Transformer encoder hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Dropout probability; 0 disables it.
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.embed_dim == 0 || self.heads == 0 {
            return Err("embed_dim and heads must be positive".into());
        }
        if self.embed_dim % self.heads != 0 {
            return Err(format!(
                "embed_dim D={} must be divisible by heads={}",
                self.embed_dim, self.heads
            ));
        }
        if self.depth == 0 {
            return Err("encoder depth must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(format!("dropout {} must lie in [0,1)", self.dropout));
        }
        Ok(())
    }
}

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Cut an image into overlapping windows and flatten each one.
///
/// Patch i (grid row r, col c with i = r * per_side + c) is the window with
/// top-left (r * stride, c * stride), flattened row-major over
/// (y, x, channel). Adjacent windows share exactly `overlap` pixel
/// rows/columns.
pub fn extract_patches<S: Scalar>(image: &Tensor<S>, cfg: &PatchConfig) -> Tensor<S> {
    if let Err(e) = cfg.validate() {
        panic!("extract_patches: {}", e);
    }
    assert_eq!(
        image.shape(),
        &[cfg.height, cfg.width, cfg.channels],
        "extract_patches: image shape {:?} does not match config {}x{}x{}",
        image.shape(),
        cfg.height,
        cfg.width,
        cfg.channels
    );
    let (p, c, stride) = (cfg.patch_size, cfg.channels, cfg.stride());
    let per_side = cfg.patches_per_side();
    let src = image.data();
    let mut out = Vec::with_capacity(cfg.num_patches() * cfg.patch_len());
    for r in 0..per_side {
        for col in 0..per_side {
            let (y0, x0) = (r * stride, col * stride);
            for py in 0..p {
                let row_base = ((y0 + py) * cfg.width + x0) * c;
                out.extend_from_slice(&src[row_base..row_base + p * c]);
            }
        }
    }
    Tensor::from_vec(vec![cfg.num_patches(), cfg.patch_len()], out)
}

/// Weights of one pre-LN encoder layer.
#[derive(Debug, Clone)]
pub struct EncoderLayerParams {
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
}

impl EncoderLayerParams {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut Rng,
        prefix: &str,
        dim: usize,
        mlp_ratio: usize,
    ) -> Self {
        let hidden = dim * mlp_ratio;
        let p = |suffix: &str| format!("{}.{}", prefix, suffix);
        EncoderLayerParams {
            ln1_gamma: store.add(p("ln1.gamma"), Tensor::filled(vec![dim], S::ONE)),
            ln1_beta: store.add(p("ln1.beta"), Tensor::zeros(vec![dim])),
            wq: store.add(p("attn.q.weight"), init_trunc_normal(rng, vec![dim, dim], 0.02)),
            bq: store.add(p("attn.q.bias"), Tensor::zeros(vec![dim])),
            wk: store.add(p("attn.k.weight"), init_trunc_normal(rng, vec![dim, dim], 0.02)),
            bk: store.add(p("attn.k.bias"), Tensor::zeros(vec![dim])),
            wv: store.add(p("attn.v.weight"), init_trunc_normal(rng, vec![dim, dim], 0.02)),
            bv: store.add(p("attn.v.bias"), Tensor::zeros(vec![dim])),
            wo: store.add(p("attn.out.weight"), init_trunc_normal(rng, vec![dim, dim], 0.02)),
            bo: store.add(p("attn.out.bias"), Tensor::zeros(vec![dim])),
            ln2_gamma: store.add(p("ln2.gamma"), Tensor::filled(vec![dim], S::ONE)),
            ln2_beta: store.add(p("ln2.beta"), Tensor::zeros(vec![dim])),
            mlp_w1: store.add(p("mlp.fc1.weight"), init_trunc_normal(rng, vec![dim, hidden], 0.02)),
            mlp_b1: store.add(p("mlp.fc1.bias"), Tensor::zeros(vec![hidden])),
            mlp_w2: store.add(p("mlp.fc2.weight"), init_trunc_normal(rng, vec![hidden, dim], 0.02)),
            mlp_b2: store.add(p("mlp.fc2.bias"), Tensor::zeros(vec![dim])),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![
            self.ln1_gamma,
            self.ln1_beta,
            self.wq,
            self.bq,
            self.wk,
            self.bk,
            self.wv,
            self.bv,
            self.wo,
            self.bo,
            self.ln2_gamma,
            self.ln2_beta,
            self.mlp_w1,
            self.mlp_b1,
            self.mlp_w2,
            self.mlp_b2,
        ]
    }
}

/// Weights of one channel-preserving residual convolution block.
#[derive(Debug, Clone)]
pub struct ResBlockParams {
    pub conv1_k: ParamId,
    pub conv1_b: ParamId,
    pub conv2_k: ParamId,
    pub conv2_b: ParamId,
}

impl ResBlockParams {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut Rng,
        prefix: &str,
        channels: usize,
    ) -> Self {
        let p = |suffix: &str| format!("{}.{}", prefix, suffix);
        ResBlockParams {
            conv1_k: store.add(p("conv1.kernel"), init_he_conv(rng, vec![3, 3, channels, channels])),
            conv1_b: store.add(p("conv1.bias"), Tensor::zeros(vec![channels])),
            conv2_k: store.add(p("conv2.kernel"), init_he_conv(rng, vec![3, 3, channels, channels])),
            conv2_b: store.add(p("conv2.bias"), Tensor::zeros(vec![channels])),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.conv1_k, self.conv1_b, self.conv2_k, self.conv2_b]
    }
}

/// All backbone weights.
#[derive(Debug, Clone)]
pub struct BackboneParams {
    pub patch_embed: ParamId,
    pub cls_token: ParamId,
    pub pos_enc: ParamId,
    pub layers: Vec<EncoderLayerParams>,
    pub res_blocks: Vec<ResBlockParams>,
}

impl BackboneParams {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut Rng,
        patch: &PatchConfig,
        encoder: &EncoderConfig,
        res_blocks: usize,
    ) -> Self {
        let d = encoder.embed_dim;
        let n = patch.num_patches();
        BackboneParams {
            patch_embed: store.add(
                "backbone.embed.weight",
                init_trunc_normal(rng, vec![patch.patch_len(), d], 0.02),
            ),
            cls_token: store.add("backbone.cls_token", init_trunc_normal(rng, vec![1, d], 0.02)),
            pos_enc: store.add(
                "backbone.pos_enc",
                init_trunc_normal(rng, vec![n + 1, d], 0.02),
            ),
            layers: (0..encoder.depth)
                .map(|l| {
                    EncoderLayerParams::init(store, rng, &format!("backbone.enc{}", l), d, encoder.mlp_ratio)
                })
                .collect(),
            res_blocks: (0..res_blocks)
                .map(|b| ResBlockParams::init(store, rng, &format!("backbone.res{}", b), d))
                .collect(),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.patch_embed, self.cls_token, self.pos_enc];
        for l in &self.layers {
            ids.extend(l.param_ids());
        }
        for b in &self.res_blocks {
            ids.extend(b.param_ids());
        }
        ids
    }
}

/// `tokens = concat(cls_token, patches x W_e) + pos_enc`; class token at
/// row 0, patch tokens row-major over the grid.
pub fn embed<S: Scalar>(
    tape: &mut Tape<S>,
    patches: TensorId,
    w_e: TensorId,
    cls_token: TensorId,
    pos_enc: TensorId,
) -> TensorId {
    let tokens = tape.matmul(patches, w_e);
    let seq = tape.concat(&[cls_token, tokens], 0);
    tape.add(seq, pos_enc)
}

/// Per-iteration dropout source: probability plus the stream to draw masks
/// from.
pub struct DropoutCtx<'r> {
    pub rng: &'r mut Rng,
    pub prob: f64,
}

fn maybe_dropout<S: Scalar>(
    tape: &mut Tape<S>,
    x: TensorId,
    dropout: &mut Option<DropoutCtx<'_>>,
) -> TensorId {
    match dropout {
        Some(ctx) if ctx.prob > 0.0 => {
            let keep = 1.0 - ctx.prob;
            let mask: Vec<bool> = (0..tape.tensor(x).numel())
                .map(|_| ctx.rng.chance(keep))
                .collect();
            tape.dropout(x, mask, keep)
        }
        _ => x,
    }
}

/// Pre-LN encoder stack: per layer `x <- x + MHA(LN(x))` then
/// `x <- x + MLP(LN(x))`. Attention is scaled dot-product with scale
/// `1/sqrt(D/heads)`; the MLP uses GELU. An empty layer stack is the
/// identity. When `attn_sink` is given, every layer's attention-weight
/// tensor id is appended to it.
pub fn encoder_forward<S: Scalar>(
    tape: &mut Tape<S>,
    tp: &mut TapeParams<S>,
    layers: &[EncoderLayerParams],
    heads: usize,
    seq: TensorId,
    mut dropout: Option<DropoutCtx<'_>>,
    mut attn_sink: Option<&mut Vec<TensorId>>,
) -> TensorId {
    let dim = tape.shape(seq)[1];
    assert_eq!(dim % heads, 0, "embed dim {} not divisible by heads {}", dim, heads);
    let head_dim = dim / heads;
    let scale = S::from_f64(1.0 / (head_dim as f64).sqrt());
    let eps = S::from_f64(LAYERNORM_EPS);

    let mut x = seq;
    for layer in layers {
        // attention sublayer
        let g1 = tp.leaf(tape, layer.ln1_gamma);
        let b1 = tp.leaf(tape, layer.ln1_beta);
        let x_ln = tape.layernorm(x, g1, b1, eps);

        let wq = tp.leaf(tape, layer.wq);
        let bq = tp.leaf(tape, layer.bq);
        let q = tape.matmul(x_ln, wq);
        let q = tape.add_bias(q, bq);
        let wk = tp.leaf(tape, layer.wk);
        let bk = tp.leaf(tape, layer.bk);
        let k = tape.matmul(x_ln, wk);
        let k = tape.add_bias(k, bk);
        let wv = tp.leaf(tape, layer.wv);
        let bv = tp.leaf(tape, layer.bv);
        let v = tape.matmul(x_ln, wv);
        let v = tape.add_bias(v, bv);

        let mut ctx_heads = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice(q, 1, h * head_dim, head_dim);
            let kh = tape.slice(k, 1, h * head_dim, head_dim);
            let vh = tape.slice(v, 1, h * head_dim, head_dim);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scores = tape.mul_scalar(scores, scale);
            let attn = tape.softmax(scores, 1);
            if let Some(sink) = attn_sink.as_deref_mut() {
                sink.push(attn);
            }
            ctx_heads.push(tape.matmul(attn, vh));
        }
        let ctx = if heads == 1 {
            ctx_heads[0]
        } else {
            tape.concat(&ctx_heads, 1)
        };
        let wo = tp.leaf(tape, layer.wo);
        let bo = tp.leaf(tape, layer.bo);
        let att_out = tape.matmul(ctx, wo);
        let att_out = tape.add_bias(att_out, bo);
        let att_out = maybe_dropout(tape, att_out, &mut dropout);
        x = tape.add(x, att_out);

        // mlp sublayer
        let g2 = tp.leaf(tape, layer.ln2_gamma);
        let b2 = tp.leaf(tape, layer.ln2_beta);
        let x_ln2 = tape.layernorm(x, g2, b2, eps);
        let w1 = tp.leaf(tape, layer.mlp_w1);
        let b1m = tp.leaf(tape, layer.mlp_b1);
        let h1 = tape.matmul(x_ln2, w1);
        let h1 = tape.add_bias(h1, b1m);
        let h1 = tape.gelu(h1);
        let w2 = tp.leaf(tape, layer.mlp_w2);
        let b2m = tp.leaf(tape, layer.mlp_b2);
        let h2 = tape.matmul(h1, w2);
        let h2 = tape.add_bias(h2, b2m);
        let h2 = maybe_dropout(tape, h2, &mut dropout);
        x = tape.add(x, h2);
    }
    x
}

/// Drop the class token and lay the n = g*g patch tokens onto the grid:
/// token i lands at (i div g, i mod g). Pure re-layout, no arithmetic.
pub fn reassemble<S: Scalar>(tape: &mut Tape<S>, seq: TensorId) -> TensorId {
    let shape = tape.shape(seq).to_vec();
    assert_eq!(shape.len(), 2, "reassemble: sequence rank {} != 2", shape.len());
    let n = shape[0] - 1;
    let g = (n as f64).sqrt().round() as usize;
    assert_eq!(
        g * g,
        n,
        "reassemble: {} patch tokens do not form a square grid",
        n
    );
    let patch_tokens = tape.slice(seq, 0, 1, n);
    tape.reshape(patch_tokens, vec![g, g, shape[1]])
}

/// Channel-preserving residual blocks:
/// `y = relu(x + conv3x3(relu(conv3x3(x))))` per block. Zero blocks is the
/// identity.
pub fn residual_stack<S: Scalar>(
    tape: &mut Tape<S>,
    tp: &mut TapeParams<S>,
    blocks: &[ResBlockParams],
    mut x: TensorId,
) -> TensorId {
    for block in blocks {
        let k1 = tp.leaf(tape, block.conv1_k);
        let b1 = tp.leaf(tape, block.conv1_b);
        let c1 = tape.conv2d(x, k1, b1);
        let r1 = tape.relu(c1);
        let k2 = tp.leaf(tape, block.conv2_k);
        let b2 = tp.leaf(tape, block.conv2_b);
        let c2 = tape.conv2d(r1, k2, b2);
        let s = tape.add(x, c2);
        x = tape.relu(s);
    }
    x
}

/// Full backbone: image -> overlapping patches -> embedded token sequence
/// -> encoder -> square feature map -> residual refinement.
/// Returns (token sequence id, feature map id).
pub fn backbone_forward<S: Scalar>(
    tape: &mut Tape<S>,
    tp: &mut TapeParams<S>,
    params: &BackboneParams,
    image: &Tensor<S>,
    patch_cfg: &PatchConfig,
    heads: usize,
    dropout: Option<DropoutCtx<'_>>,
) -> (TensorId, TensorId) {
    let patches = extract_patches(image, patch_cfg);
    let patches = tape.constant(patches);
    let w_e = tp.leaf(tape, params.patch_embed);
    let cls = tp.leaf(tape, params.cls_token);
    let pos = tp.leaf(tape, params.pos_enc);
    let seq = embed(tape, patches, w_e, cls, pos);
    let encoded = encoder_forward(tape, tp, &params.layers, heads, seq, dropout, None);
    let map = reassemble(tape, encoded);
    let fm = residual_stack(tape, tp, &params.res_blocks, map);
    (encoded, fm)
}
