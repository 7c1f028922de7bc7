//! Data-driven soft prompts and their assembly into the conditioning tensor.
//!
//! Three views of the noisy tokens are extracted: a band-limited periodic
//! view (dominant frequency components, inverse-transformed and projected), a
//! temporal view (one attention + feed-forward block across time), and a
//! feature view (attention across the C0 features within each time step, so
//! output at time t depends only on input at time t). The views are
//! concatenated with the environment embedding and projected to the
//! conditioning width.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamStore, PId};
use crate::seeds;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PromptParams {
    pub c0: usize,
    pub c_cond: usize,
    pub m_top: usize,
    pub n_heads: usize,
    pub ff_mult: usize,
    pub feat_dim: usize,
    pub store: ParamStore,
    per_w: PId,
    per_b: PId,
    t_wqkv: PId,
    t_bqkv: PId,
    t_wo: PId,
    t_bo: PId,
    t_ff_w1: PId,
    t_ff_b1: PId,
    t_ff_w2: PId,
    t_ff_b2: PId,
    f_lift_w: PId,
    f_lift_b: PId,
    f_wqkv: PId,
    f_bqkv: PId,
    f_wo: PId,
    f_bo: PId,
    f_read_w: PId,
    f_read_b: PId,
    f_ff_w1: PId,
    f_ff_b1: PId,
    f_ff_w2: PId,
    f_ff_b2: PId,
    asm_w: PId,
    asm_b: PId,
}

impl PromptParams {
    pub fn init(c0: usize, c_cond: usize, m_top: usize, n_heads: usize, ff_mult: usize, feat_dim: usize, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut idx = 0u64;
        let mut w = |store: &mut ParamStore, name: &str, shape: &[usize], fan_in: usize| {
            idx += 1;
            let mut rng = seeds::stream(seed, &format!("prompt.{name}"), idx);
            let std = 1.0 / (fan_in as f64).sqrt();
            store.add(name, Tensor::randn(shape, &mut rng).map(|v| v * std))
        };
        let ff = ff_mult * c0;
        let per_w = w(&mut store, "per_w", &[c0, c0], c0);
        let per_b = store.add("per_b", Tensor::zeros(&[c0]));
        let t_wqkv = w(&mut store, "t_wqkv", &[c0, 3 * c0], c0);
        let t_bqkv = store.add("t_bqkv", Tensor::zeros(&[3 * c0]));
        let t_wo = w(&mut store, "t_wo", &[c0, c0], c0);
        let t_bo = store.add("t_bo", Tensor::zeros(&[c0]));
        let t_ff_w1 = w(&mut store, "t_ff_w1", &[c0, ff], c0);
        let t_ff_b1 = store.add("t_ff_b1", Tensor::zeros(&[ff]));
        let t_ff_w2 = w(&mut store, "t_ff_w2", &[ff, c0], ff);
        let t_ff_b2 = store.add("t_ff_b2", Tensor::zeros(&[c0]));
        let f_lift_w = w(&mut store, "f_lift_w", &[1, c0, feat_dim], 1);
        let f_lift_b = w(&mut store, "f_lift_b", &[1, c0, feat_dim], 1);
        let f_wqkv = w(&mut store, "f_wqkv", &[feat_dim, 3 * feat_dim], feat_dim);
        let f_bqkv = store.add("f_bqkv", Tensor::zeros(&[3 * feat_dim]));
        let f_wo = w(&mut store, "f_wo", &[feat_dim, feat_dim], feat_dim);
        let f_bo = store.add("f_bo", Tensor::zeros(&[feat_dim]));
        let f_read_w = w(&mut store, "f_read_w", &[1, c0, feat_dim], feat_dim);
        let f_read_b = store.add("f_read_b", Tensor::zeros(&[1, c0, 1]));
        let f_ff_w1 = w(&mut store, "f_ff_w1", &[c0, ff], c0);
        let f_ff_b1 = store.add("f_ff_b1", Tensor::zeros(&[ff]));
        let f_ff_w2 = w(&mut store, "f_ff_w2", &[ff, c0], ff);
        let f_ff_b2 = store.add("f_ff_b2", Tensor::zeros(&[c0]));
        let asm_w = w(&mut store, "asm_w", &[4 * c0, c_cond], 4 * c0);
        let asm_b = store.add("asm_b", Tensor::zeros(&[c_cond]));
        PromptParams {
            c0,
            c_cond,
            m_top,
            n_heads,
            ff_mult,
            feat_dim,
            store,
            per_w,
            per_b,
            t_wqkv,
            t_bqkv,
            t_wo,
            t_bo,
            t_ff_w1,
            t_ff_b1,
            t_ff_w2,
            t_ff_b2,
            f_lift_w,
            f_lift_b,
            f_wqkv,
            f_bqkv,
            f_wo,
            f_bo,
            f_read_w,
            f_read_b,
            f_ff_w1,
            f_ff_b1,
            f_ff_w2,
            f_ff_b2,
            asm_w,
            asm_b,
        }
    }

    fn check_tokens(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 3 || x.dim(2) != self.c0 {
            return Err(Error::shape(format!("expected (B, L, {}) tokens, got {:?}", self.c0, x.shape())));
        }
        if x.dim(1) < 2 {
            return Err(Error::invalid("token sequence must have at least 2 steps".to_string()));
        }
        if self.m_top < 1 || self.m_top > x.dim(1) / 2 + 1 {
            return Err(Error::invalid(format!(
                "m_top {} outside 1..={} for L={}",
                self.m_top,
                x.dim(1) / 2 + 1,
                x.dim(1)
            )));
        }
        Ok(())
    }
}

/// Conditioning tensor (B, L, C_cond).
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBundle {
    pub p: Tensor,
}

pub(crate) fn periodic_g(g: &mut Graph, x: Var, p: &PromptParams, b: &Bound) -> Var {
    let bl = g.bandlimit(x, p.m_top);
    g.linear(bl, b.var(p.per_w), b.var(p.per_b))
}

pub(crate) fn temporal_g(g: &mut Graph, x: Var, p: &PromptParams, b: &Bound) -> Var {
    let ln = g.layer_norm(x);
    let attn = g.attention(ln, b.var(p.t_wqkv), b.var(p.t_bqkv), b.var(p.t_wo), b.var(p.t_bo), p.n_heads);
    let h = g.add(x, attn);
    let ln2 = g.layer_norm(h);
    let f = g.linear(ln2, b.var(p.t_ff_w1), b.var(p.t_ff_b1));
    let f = g.gelu(f);
    let f = g.linear(f, b.var(p.t_ff_w2), b.var(p.t_ff_b2));
    g.add(h, f)
}

pub(crate) fn feature_g(g: &mut Graph, x: Var, p: &PromptParams, b: &Bound) -> Var {
    let (bsz, l, c0) = {
        let v = g.value(x);
        (v.dim(0), v.dim(1), v.dim(2))
    };
    // each time step becomes a batch row of C0 scalar feature tokens
    let r = g.reshape(x, &[bsz * l, c0, 1]);
    let lifted = g.mul(r, b.var(p.f_lift_w));
    let tokens = g.add(lifted, b.var(p.f_lift_b));
    let attn = g.attention(tokens, b.var(p.f_wqkv), b.var(p.f_bqkv), b.var(p.f_wo), b.var(p.f_bo), 1);
    let read = g.mul(attn, b.var(p.f_read_w));
    let read = g.sum_last(read);
    let read = g.add(read, b.var(p.f_read_b));
    let back = g.reshape(read, &[bsz, l, c0]);
    let h = g.add(x, back);
    // feature-mixing feed-forward, still per time step
    let ln = g.layer_norm(h);
    let f = g.linear(ln, b.var(p.f_ff_w1), b.var(p.f_ff_b1));
    let f = g.gelu(f);
    let f = g.linear(f, b.var(p.f_ff_w2), b.var(p.f_ff_b2));
    g.add(h, f)
}

pub(crate) fn assemble_g(g: &mut Graph, e_env: Var, wp: Var, wt: Var, wf: Var, p: &PromptParams, b: &Bound) -> Var {
    let cat = g.concat_last(&[e_env, wp, wt, wf]);
    g.linear(cat, b.var(p.asm_w), b.var(p.asm_b))
}

fn run_one(x: &Tensor, p: &PromptParams, f: impl Fn(&mut Graph, Var, &PromptParams, &Bound) -> Var) -> Result<Tensor> {
    p.check_tokens(x)?;
    let mut g = Graph::new();
    let bound = p.store.bind(&mut g, false);
    let xv = g.leaf(x.clone());
    let out = f(&mut g, xv, p, &bound);
    let t = g.value(out).clone();
    if !t.is_finite() {
        return Err(Error::numeric("prompt output is not finite".to_string()));
    }
    Ok(t)
}

/// Band-limited periodic view of the tokens.
pub fn periodic_prompt(xk: &Tensor, params: &PromptParams) -> Result<Tensor> {
    run_one(xk, params, periodic_g)
}

/// Attention across time positions.
pub fn temporal_prompt(xk: &Tensor, params: &PromptParams) -> Result<Tensor> {
    run_one(xk, params, temporal_g)
}

/// Attention across features within each time step.
pub fn feature_prompt(xk: &Tensor, params: &PromptParams) -> Result<Tensor> {
    run_one(xk, params, feature_g)
}

/// Concatenate the environment embedding with the three prompt views and
/// project to the conditioning width.
pub fn assemble_prompt(
    e_env: &Tensor,
    wp: &Tensor,
    wt: &Tensor,
    wf: &Tensor,
    params: &PromptParams,
) -> Result<PromptBundle> {
    for t in [e_env, wp, wt, wf] {
        if t.shape() != e_env.shape() {
            return Err(Error::shape(format!(
                "prompt segments must share shape, got {:?} vs {:?}",
                t.shape(),
                e_env.shape()
            )));
        }
        if t.rank() != 3 || t.dim(2) != params.c0 {
            return Err(Error::shape(format!("segment shape {:?} does not end in C0", t.shape())));
        }
    }
    let mut g = Graph::new();
    let bound = params.store.bind(&mut g, false);
    let (e, a, b, c) = (g.leaf(e_env.clone()), g.leaf(wp.clone()), g.leaf(wt.clone()), g.leaf(wf.clone()));
    let out = assemble_g(&mut g, e, a, b, c, params, &bound);
    let p = g.value(out).clone();
    if !p.is_finite() {
        return Err(Error::numeric("assembled prompt is not finite".to_string()));
    }
    Ok(PromptBundle { p })
}
