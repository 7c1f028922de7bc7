//! Tokenizer/detokenizer and the conditioning-modulated transformer denoiser.
//!
//! Each block applies `x' = x + a1 * Attn(b1 * LN(x) + g1)` followed by
//! `x'' = x' + a2 * FF(b2 * LN(x') + g2)`, with the six modulation tensors
//! produced per block by a small MLP over the conditioning prompt. The
//! modulation MLP's output layer starts at zero, so the whole stack is the
//! identity map at initialization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamStore, PId};
use crate::prompt_net::PromptBundle;
use crate::seeds;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub l: usize,
    pub c0: usize,
    pub c_cond: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub ff_mult: usize,
    pub kernel_width: usize,
    pub m_top: usize,
    pub feat_dim: usize,
    pub vae_hidden: usize,
    /// Derive one modulation set per position instead of pooling the prompt
    /// over the sequence.
    pub per_position_modulation: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            l: 64,
            c0: 64,
            c_cond: 64,
            n_blocks: 4,
            n_heads: 4,
            ff_mult: 4,
            kernel_width: 3,
            m_top: 4,
            feat_dim: 8,
            vae_hidden: 32,
            per_position_modulation: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l < crate::datagen::MIN_SERIES_LEN {
            return Err(Error::invalid("sequence length too small".to_string()));
        }
        if self.c0 == 0 || self.c0 % self.n_heads != 0 {
            return Err(Error::invalid(format!("heads {} must divide C0 {}", self.n_heads, self.c0)));
        }
        if self.kernel_width % 2 == 0 || self.kernel_width == 0 {
            return Err(Error::invalid("kernel width must be odd".to_string()));
        }
        if self.m_top < 1 || self.m_top > self.l / 2 + 1 {
            return Err(Error::invalid(format!("m_top {} outside 1..={}", self.m_top, self.l / 2 + 1)));
        }
        if self.n_blocks == 0 || self.c_cond == 0 || self.ff_mult == 0 || self.feat_dim == 0 || self.vae_hidden == 0 {
            return Err(Error::invalid("model dimensions must be positive".to_string()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockIds {
    pub wqkv: PId,
    pub bqkv: PId,
    pub wo: PId,
    pub bo: PId,
    pub ff_w1: PId,
    pub ff_b1: PId,
    pub ff_w2: PId,
    pub ff_b2: PId,
    pub mod_w1: PId,
    pub mod_b1: PId,
    pub mod_w2: PId,
    pub mod_b2: PId,
}

/// Backbone parameter arrays plus the fixed sinusoidal position table.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub store: ParamStore,
    /// (1, L, C0); deterministic function of (L, C0), not trained.
    pub pos_table: Tensor,
    pub tok_w: PId,
    pub tok_b: PId,
    pub detok_w: PId,
    pub detok_b: PId,
    pub step_w1: PId,
    pub step_b1: PId,
    pub step_w2: PId,
    pub step_b2: PId,
    pub blocks: Vec<BlockIds>,
    pub head_w: PId,
    pub head_b: PId,
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut idx = 0u64;
        let mut w = |store: &mut ParamStore, name: String, shape: &[usize], std: f64| {
            idx += 1;
            let mut rng = seeds::stream(seed, &format!("backbone.{name}"), idx);
            store.add(name, Tensor::randn(shape, &mut rng).map(|v| v * std))
        };
        let (c0, ff) = (cfg.c0, cfg.ff_mult * cfg.c0);
        // Tokens must be roughly unit-scale against the unit diffusion
        // noise, or most of the schedule runs below the data's
        // signal-to-noise floor. Series live in [0, 1] with local smoothness,
        // so a tap-sum gain of ~8 and a bias centering the mid-scale value
        // 0.5 put per-channel token std near 1.
        let tok_w = w(&mut store, "tok_w".into(), &[c0, cfg.kernel_width], 6.0);
        let tok_b = {
            let wt = store.get(tok_w).clone();
            let mut b = Tensor::zeros(&[c0]);
            for c in 0..c0 {
                let row_sum: f64 = (0..cfg.kernel_width).map(|j| wt.data()[c * cfg.kernel_width + j]).sum();
                b.data_mut()[c] = -0.5 * row_sum;
            }
            store.add("tok_b", b)
        };
        let detok_w = w(&mut store, "detok_w".into(), &[c0, 1], 1.0 / (c0 as f64).sqrt());
        let detok_b = store.add("detok_b", Tensor::zeros(&[1]));
        let step_w1 = w(&mut store, "step_w1".into(), &[c0, c0], 1.0 / (c0 as f64).sqrt());
        let step_b1 = store.add("step_b1", Tensor::zeros(&[c0]));
        let step_w2 = w(&mut store, "step_w2".into(), &[c0, c0], 1.0 / (c0 as f64).sqrt());
        let step_b2 = store.add("step_b2", Tensor::zeros(&[c0]));
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for i in 0..cfg.n_blocks {
            let wqkv = w(&mut store, format!("blk{i}.wqkv"), &[c0, 3 * c0], 1.0 / (c0 as f64).sqrt());
            let bqkv = store.add(format!("blk{i}.bqkv"), Tensor::zeros(&[3 * c0]));
            let wo = w(&mut store, format!("blk{i}.wo"), &[c0, c0], 1.0 / (c0 as f64).sqrt());
            let bo = store.add(format!("blk{i}.bo"), Tensor::zeros(&[c0]));
            let ff_w1 = w(&mut store, format!("blk{i}.ff_w1"), &[c0, ff], 1.0 / (c0 as f64).sqrt());
            let ff_b1 = store.add(format!("blk{i}.ff_b1"), Tensor::zeros(&[ff]));
            let ff_w2 = w(&mut store, format!("blk{i}.ff_w2"), &[ff, c0], 1.0 / (ff as f64).sqrt());
            let ff_b2 = store.add(format!("blk{i}.ff_b2"), Tensor::zeros(&[c0]));
            let mod_w1 = w(&mut store, format!("blk{i}.mod_w1"), &[cfg.c_cond, c0], 1.0 / (cfg.c_cond as f64).sqrt());
            let mod_b1 = store.add(format!("blk{i}.mod_b1"), Tensor::zeros(&[c0]));
            // zero-initialized output layer: all modulations start at zero
            let mod_w2 = store.add(format!("blk{i}.mod_w2"), Tensor::zeros(&[c0, 6 * c0]));
            let mod_b2 = store.add(format!("blk{i}.mod_b2"), Tensor::zeros(&[6 * c0]));
            blocks.push(BlockIds { wqkv, bqkv, wo, bo, ff_w1, ff_b1, ff_w2, ff_b2, mod_w1, mod_b1, mod_w2, mod_b2 });
        }
        let head_w = w(&mut store, "head_w".into(), &[c0, c0], 1.0 / (c0 as f64).sqrt());
        let head_b = store.add("head_b", Tensor::zeros(&[c0]));
        ModelParams {
            store,
            pos_table: position_table(cfg.l, c0),
            tok_w,
            tok_b,
            detok_w,
            detok_b,
            step_w1,
            step_b1,
            step_w2,
            step_b2,
            blocks,
            head_w,
            head_b,
        }
    }
}

/// Gain on the additive position/step embeddings. They share the token
/// space with the noise the model must predict; keeping them an order of
/// magnitude below the unit token scale leaves them legible to the blocks
/// without planting a large position-dependent bias in the noise estimate.
pub const EMBED_GAIN: f64 = 0.1;

/// Interleaved sin/cos table of shape (1, L, C0), on the f32 grid like all
/// other stored arrays.
pub fn position_table(l: usize, c0: usize) -> Tensor {
    let mut t = Tensor::zeros(&[1, l, c0]);
    for pos in 0..l {
        let row = sinusoid_row(pos as f64, c0);
        let base = pos * c0;
        for (dst, v) in t.data_mut()[base..base + c0].iter_mut().zip(row) {
            *dst = EMBED_GAIN * v;
        }
    }
    t.quantize_f32();
    t
}

pub fn sinusoid_row(pos: f64, dim: usize) -> Vec<f64> {
    let mut row = vec![0.0; dim];
    for i in 0..dim / 2 {
        let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
        row[2 * i] = (pos * freq).sin();
        row[2 * i + 1] = (pos * freq).cos();
    }
    row
}

/// Sinusoidal embedding of each element's diffusion step, shape (B, 1, C0).
pub fn step_embedding(ks: &[usize], c0: usize) -> Tensor {
    let mut t = Tensor::zeros(&[ks.len(), 1, c0]);
    for (b, &k) in ks.iter().enumerate() {
        let row = sinusoid_row(k as f64, c0);
        for (dst, v) in t.data_mut()[b * c0..(b + 1) * c0].iter_mut().zip(row) {
            *dst = EMBED_GAIN * v;
        }
    }
    t
}

/// The six modulation tensors of one block, each (B, 1, C0) or (B, L, C0).
#[derive(Clone, Debug, PartialEq)]
pub struct ModulationSet {
    pub a1: Tensor,
    pub b1: Tensor,
    pub g1: Tensor,
    pub a2: Tensor,
    pub b2: Tensor,
    pub g2: Tensor,
}

// ---- graph builders ----

pub(crate) fn tokenize_g(g: &mut Graph, series: Var, p: &ModelParams, b: &Bound) -> Var {
    g.conv1d_same(series, b.var(p.tok_w), b.var(p.tok_b))
}

pub(crate) fn detokenize_g(g: &mut Graph, tokens: Var, p: &ModelParams, b: &Bound) -> Var {
    g.linear(tokens, b.var(p.detok_w), b.var(p.detok_b))
}

/// `x + pe(L) + MLP(pe(k))` per the input-acquisition step.
pub(crate) fn add_embeddings_g(g: &mut Graph, x: Var, ks: &[usize], p: &ModelParams, b: &Bound) -> Var {
    let c0 = g.value(x).dim(2);
    let pos = g.leaf(p.pos_table.clone());
    let with_pos = g.add(x, pos);
    let se = g.leaf(step_embedding(ks, c0));
    let h = g.linear(se, b.var(p.step_w1), b.var(p.step_b1));
    let h = g.gelu(h);
    let h = g.linear(h, b.var(p.step_w2), b.var(p.step_b2));
    g.add(with_pos, h)
}

/// Modulations from the prompt via the block's scaling MLP. The network
/// emits offsets around neutral values: the norm scales b1, b2 sit at
/// 1 + offset, the shifts g1, g2 and the residual gates a1, a2 at the raw
/// offset. With the zero-initialized output layer the gates are exactly
/// zero (each block is the identity) while the attention and feed-forward
/// branches still see the layer-normed tokens, so the conditioning path
/// receives gradient from the first step.
pub(crate) fn modulations_g(
    g: &mut Graph,
    prompt: Var,
    blk: &BlockIds,
    b: &Bound,
    per_position: bool,
) -> [Var; 6] {
    let base = if per_position { prompt } else { g.mean_seq(prompt) };
    let h = g.linear(base, b.var(blk.mod_w1), b.var(blk.mod_b1));
    let h = g.gelu(h);
    let m6 = g.linear(h, b.var(blk.mod_w2), b.var(blk.mod_b2));
    let c0 = g.value(m6).dim(2) / 6;
    let one = g.leaf(Tensor::full(&[1, 1, 1], 1.0));
    let [a1, b1_raw, g1, a2, b2_raw, g2] = [0, 1, 2, 3, 4, 5].map(|i| g.slice_last(m6, i * c0, c0));
    let b1 = g.add(b1_raw, one);
    let b2 = g.add(b2_raw, one);
    [a1, b1, g1, a2, b2, g2]
}

pub(crate) fn block_forward_g(g: &mut Graph, x: Var, mods: &[Var; 6], blk: &BlockIds, b: &Bound, heads: usize) -> Var {
    let [a1, b1, g1, a2, b2, g2] = *mods;
    let ln = g.layer_norm(x);
    let t = g.mul(ln, b1);
    let t = g.add(t, g1);
    let attn = g.attention(t, b.var(blk.wqkv), b.var(blk.bqkv), b.var(blk.wo), b.var(blk.bo), heads);
    let attn = g.mul(attn, a1);
    let x1 = g.add(x, attn);
    let ln2 = g.layer_norm(x1);
    let t2 = g.mul(ln2, b2);
    let t2 = g.add(t2, g2);
    let f = g.linear(t2, b.var(blk.ff_w1), b.var(blk.ff_b1));
    let f = g.gelu(f);
    let f = g.linear(f, b.var(blk.ff_w2), b.var(blk.ff_b2));
    let f = g.mul(f, a2);
    g.add(x1, f)
}

/// Blocks plus output head over embedded tokens `z`, conditioned on `prompt`.
pub(crate) fn denoise_tokens_g(
    g: &mut Graph,
    z: Var,
    prompt: Var,
    p: &ModelParams,
    b: &Bound,
    heads: usize,
    per_position: bool,
) -> Var {
    let mut x = z;
    for blk in &p.blocks {
        let mods = modulations_g(g, prompt, blk, b, per_position);
        x = block_forward_g(g, x, &mods, blk, b, heads);
    }
    g.linear(x, b.var(p.head_w), b.var(p.head_b))
}

// ---- tensor-level ops ----

/// Temporal convolution lifting (B, L, 1) series into (B, L, C0) tokens.
pub fn tokenize(series: &Tensor, params: &ModelParams) -> Result<Tensor> {
    if series.rank() != 3 || series.dim(2) != 1 {
        return Err(Error::shape(format!("tokenize expects (B, L, 1), got {:?}", series.shape())));
    }
    let mut g = Graph::new();
    let b = params.store.bind(&mut g, false);
    let s = g.leaf(series.clone());
    let out = tokenize_g(&mut g, s, params, &b);
    Ok(g.value(out).clone())
}

/// Per-position linear map back to a scalar series.
pub fn detokenize(tokens: &Tensor, params: &ModelParams) -> Result<Tensor> {
    let c0 = params.store.get(params.detok_w).dim(0);
    if tokens.rank() != 3 || tokens.dim(2) != c0 {
        return Err(Error::shape(format!("detokenize expects (B, L, {c0}), got {:?}", tokens.shape())));
    }
    let mut g = Graph::new();
    let b = params.store.bind(&mut g, false);
    let t = g.leaf(tokens.clone());
    let out = detokenize_g(&mut g, t, params, &b);
    Ok(g.value(out).clone())
}

/// One modulated block applied outside the tape.
pub fn block_forward(x: &Tensor, mods: &ModulationSet, params: &ModelParams, block: usize, heads: usize) -> Result<Tensor> {
    let blk = params
        .blocks
        .get(block)
        .ok_or_else(|| Error::invalid(format!("block index {block} out of range")))?;
    let mut g = Graph::new();
    let b = params.store.bind(&mut g, false);
    let xv = g.leaf(x.clone());
    let mods = [
        g.leaf(mods.a1.clone()),
        g.leaf(mods.b1.clone()),
        g.leaf(mods.g1.clone()),
        g.leaf(mods.a2.clone()),
        g.leaf(mods.b2.clone()),
        g.leaf(mods.g2.clone()),
    ];
    let out = block_forward_g(&mut g, xv, &mods, blk, &b, heads);
    let t = g.value(out).clone();
    if !t.is_finite() {
        return Err(Error::numeric(format!("non-finite activations in block {block}")));
    }
    Ok(t)
}

/// Run the block stack alone (no embeddings, no head), with per-block
/// modulations derived from the prompt.
pub fn run_blocks(x: &Tensor, prompt: &PromptBundle, params: &ModelParams, cfg: &ModelConfig) -> Result<Tensor> {
    if x.rank() != 3 || x.dim(2) != cfg.c0 {
        return Err(Error::shape(format!("run_blocks expects (B, L, {}), got {:?}", cfg.c0, x.shape())));
    }
    let mut g = Graph::new();
    let b = params.store.bind(&mut g, false);
    let mut xv = g.leaf(x.clone());
    let pv = g.leaf(prompt.p.clone());
    for blk in &params.blocks {
        let mods = modulations_g(&mut g, pv, blk, &b, cfg.per_position_modulation);
        xv = block_forward_g(&mut g, xv, &mods, blk, &b, cfg.n_heads);
    }
    Ok(g.value(xv).clone())
}

/// Full denoiser pass: add position/step embeddings, derive per-block
/// modulations from the prompt, run the block stack, apply the head.
pub fn predict_noise(
    xk_mixed: &Tensor,
    k: usize,
    prompt: &PromptBundle,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<Tensor> {
    if xk_mixed.rank() != 3 || xk_mixed.dim(2) != cfg.c0 {
        return Err(Error::shape(format!("predict_noise expects (B, L, {}), got {:?}", cfg.c0, xk_mixed.shape())));
    }
    if prompt.p.dim(1) != xk_mixed.dim(1) || prompt.p.dim(0) != xk_mixed.dim(0) {
        return Err(Error::shape("prompt and tokens disagree on batch or length".to_string()));
    }
    let ks = vec![k; xk_mixed.dim(0)];
    let mut g = Graph::new();
    let b = params.store.bind(&mut g, false);
    let x = g.leaf(xk_mixed.clone());
    let z = add_embeddings_g(&mut g, x, &ks, params, &b);
    let pv = g.leaf(prompt.p.clone());
    let out = denoise_tokens_g(&mut g, z, pv, params, &b, cfg.n_heads, cfg.per_position_modulation);
    let t = g.value(out).clone();
    if !t.is_finite() {
        return Err(Error::numeric("non-finite denoiser output".to_string()));
    }
    Ok(t)
}
