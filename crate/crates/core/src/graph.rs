//! Reverse-mode autodiff over a flat tape of tensor ops.
//!
//! Ops execute eagerly as nodes are pushed, so node order is already a
//! topological order and backward is a single reverse sweep. Fused ops
//! (attention, layer norm, the band-limit transform) carry the forward
//! cache they need for their hand-written adjoints; every adjoint here is
//! pinned by the finite-difference tests at the bottom of the module.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

struct AttnCache {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
}

struct LnCache {
    rstd: Vec<f64>,
}

enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Linear { x: Var, w: Var, b: Var },
    Conv1dSame { x: Var, w: Var, b: Var },
    LayerNorm { x: Var, cache: Option<LnCache> },
    Attention { x: Var, wqkv: Var, bqkv: Var, wo: Var, bo: Var, heads: usize, cache: Option<AttnCache> },
    Gelu(Var),
    Exp(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    MeanSeq(Var),
    Expand { x: Var },
    Reshape { x: Var },
    SumLast(Var),
    ConcatLast(Vec<Var>),
    ConcatBatch(Vec<Var>),
    SliceLast { x: Var, start: usize, len: usize },
    Bandlimit { x: Var, keep: Vec<bool> },
    Mse { a: Var, b: Var },
    MaskedMse { pred: Var, target: Var, mask: Vec<bool>, denom: f64 },
    KlGauss { mu: Var, logvar: Var },
}

pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    param_vars: Vec<Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), param_vars: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Input that never receives a gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable input; gradients are collected in registration order.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let v = self.push(t.clone(), Op::Param, true);
        self.param_vars.push(v);
        v
    }

    pub fn n_params(&self) -> usize {
        self.param_vars.len()
    }

    // ---- elementwise / broadcast ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_binary(self.value(a), self.value(b), |x, y| x + y);
        let needs = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_binary(self.value(a), self.value(b), |x, y| x * y);
        let needs = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), needs)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        let needs = self.ng(a);
        self.push(value, Op::Scale(a, c), needs)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu_fwd);
        let needs = self.ng(a);
        self.push(value, Op::Gelu(a), needs)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let needs = self.ng(a);
        self.push(value, Op::Exp(a), needs)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        let needs = self.ng(a);
        self.push(value, Op::Clamp { x: a, lo, hi }, needs)
    }

    // ---- linear algebra ----

    /// `x @ w + b` where `x` is (..., Cin), `w` is (Cin, Cout), `b` is (Cout).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        assert_eq!(wv.rank(), 2, "linear weight must be rank 2");
        let cin = wv.dim(0);
        let cout = wv.dim(1);
        assert_eq!(*xv.shape().last().unwrap(), cin, "linear: input width mismatch");
        assert_eq!(bv.numel(), cout, "linear: bias width mismatch");
        let rows = xv.numel() / cin;
        let mut out = vec![0.0; rows * cout];
        gemm(rows, cin, cout, xv.data(), false, wv.data(), false, &mut out, false);
        for r in 0..rows {
            for c in 0..cout {
                out[r * cout + c] += bv.data()[c];
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = cout;
        let needs = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(Tensor::new(shape, out), Op::Linear { x, w, b }, needs)
    }

    /// Width-3 same-padded temporal convolution: (B, L, 1) -> (B, L, C).
    pub fn conv1d_same(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        assert_eq!(xv.rank(), 3);
        assert_eq!(xv.dim(2), 1, "conv input must have one channel");
        assert_eq!(wv.rank(), 2);
        let (bsz, l) = (xv.dim(0), xv.dim(1));
        let c = wv.dim(0);
        let kw = wv.dim(1);
        assert_eq!(bv.numel(), c);
        let mut out = vec![0.0; bsz * l * c];
        let xd = xv.data();
        let wd = wv.data();
        let half = kw / 2;
        for bi in 0..bsz {
            for t in 0..l {
                for ci in 0..c {
                    let mut acc = bv.data()[ci];
                    for j in 0..kw {
                        let ti = t as isize + j as isize - half as isize;
                        if ti >= 0 && (ti as usize) < l {
                            acc += wd[ci * kw + j] * xd[bi * l + ti as usize];
                        }
                    }
                    out[(bi * l + t) * c + ci] = acc;
                }
            }
        }
        let needs = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(Tensor::new(vec![bsz, l, c], out), Op::Conv1dSame { x, w, b }, needs)
    }

    /// Non-affine layer norm over the last axis.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = *xv.shape().last().unwrap();
        let rows = xv.numel() / c;
        let mut out = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let xd = xv.data();
        for r in 0..rows {
            let row = &xd[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for i in 0..c {
                out[r * c + i] = (row[i] - mean) * rs;
            }
        }
        let needs = self.ng(x);
        let cache = needs.then_some(LnCache { rstd });
        self.push(Tensor::new(xv.shape().to_vec(), out), Op::LayerNorm { x, cache }, needs)
    }

    /// Multi-head self-attention: qkv projection, scaled dot-product with
    /// row softmax, head merge, output projection. `x` is (N, S, E).
    pub fn attention(&mut self, x: Var, wqkv: Var, bqkv: Var, wo: Var, bo: Var, heads: usize) -> Var {
        let needs = self.ng(x) || self.ng(wqkv) || self.ng(bqkv) || self.ng(wo) || self.ng(bo);
        let (out, cache) = mhsa_forward(
            self.value(x),
            self.value(wqkv),
            self.value(bqkv),
            self.value(wo),
            self.value(bo),
            heads,
        );
        let cache = needs.then_some(cache);
        self.push(out, Op::Attention { x, wqkv, bqkv, wo, bo, heads, cache }, needs)
    }

    // ---- shape ops ----

    /// Mean over the sequence axis: (B, S, C) -> (B, 1, C).
    pub fn mean_seq(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rank(), 3);
        let (b, s, c) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let mut out = vec![0.0; b * c];
        for bi in 0..b {
            for si in 0..s {
                for ci in 0..c {
                    out[bi * c + ci] += xv.at3(bi, si, ci) / s as f64;
                }
            }
        }
        let needs = self.ng(x);
        self.push(Tensor::new(vec![b, 1, c], out), Op::MeanSeq(x), needs)
    }

    /// Broadcast-materialize `x` to `shape`.
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Var {
        let xv = self.value(x);
        let out = broadcast_to(xv, shape);
        let needs = self.ng(x);
        self.push(out, Op::Expand { x }, needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).reshape(shape).expect("reshape: element count mismatch");
        let needs = self.ng(x);
        self.push(out, Op::Reshape { x }, needs)
    }

    /// Sum over the last axis, keeping it as 1.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = *xv.shape().last().unwrap();
        let rows = xv.numel() / c;
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            out[r] = xv.data()[r * c..(r + 1) * c].iter().sum();
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        let needs = self.ng(x);
        self.push(Tensor::new(shape, out), Op::SumLast(x), needs)
    }

    pub fn concat_last(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let lead = self.value(parts[0]).shape()[..self.value(parts[0]).rank() - 1].to_vec();
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = parts.iter().map(|&p| *self.value(p).shape().last().unwrap()).collect();
        for &p in parts {
            assert_eq!(&self.value(p).shape()[..self.value(p).rank() - 1], &lead[..], "concat_last: leading dims differ");
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (pi, &p) in parts.iter().enumerate() {
            let w = widths[pi];
            let d = self.value(p).data();
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&d[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let mut shape = lead;
        shape.push(total);
        let needs = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::new(shape, out), Op::ConcatLast(parts.to_vec()), needs)
    }

    pub fn concat_batch(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let tail = self.value(parts[0]).shape()[1..].to_vec();
        let mut total_b = 0;
        let mut out = Vec::new();
        for &p in parts {
            assert_eq!(&self.value(p).shape()[1..], &tail[..], "concat_batch: trailing dims differ");
            total_b += self.value(p).dim(0);
            out.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![total_b];
        shape.extend_from_slice(&tail);
        let needs = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::new(shape, out), Op::ConcatBatch(parts.to_vec()), needs)
    }

    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let c = *xv.shape().last().unwrap();
        assert!(start + len <= c, "slice_last out of range");
        let rows = xv.numel() / c;
        let mut out = vec![0.0; rows * len];
        for r in 0..rows {
            out[r * len..(r + 1) * len].copy_from_slice(&xv.data()[r * c + start..r * c + start + len]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let needs = self.ng(x);
        self.push(Tensor::new(shape, out), Op::SliceLast { x, start, len }, needs)
    }

    /// Keep only the `m_top` largest-magnitude frequency bins of each (batch,
    /// channel) series along the sequence axis; inverse-transform back.
    /// The kept-bin selection is treated as constant in the adjoint, which
    /// makes the op an orthogonal projection (its own transpose).
    pub fn bandlimit(&mut self, x: Var, m_top: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rank(), 3);
        let (b, l, c) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let nb = l / 2 + 1;
        let tables = TrigTables::new(l);
        let mut keep = vec![false; b * c * nb];
        let mut out = vec![0.0; xv.numel()];
        let mut series = vec![0.0; l];
        for bi in 0..b {
            for ci in 0..c {
                for t in 0..l {
                    series[t] = xv.at3(bi, t, ci);
                }
                let kb = &mut keep[(bi * c + ci) * nb..(bi * c + ci + 1) * nb];
                select_top_bins(&series, &tables, m_top, kb);
                let filtered = project_bins(&series, &tables, kb);
                for t in 0..l {
                    out[xv.idx3(bi, t, ci)] = filtered[t];
                }
            }
        }
        let needs = self.ng(x);
        self.push(Tensor::new(vec![b, l, c], out), Op::Bandlimit { x, keep }, needs)
    }

    // ---- losses ----

    /// Mean squared error over all elements (scalar).
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "mse: shape mismatch");
        let n = av.numel() as f64;
        let s: f64 = av.data().iter().zip(bv.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let needs = self.ng(a) || self.ng(b);
        self.push(Tensor::scalar(s / n), Op::Mse { a, b }, needs)
    }

    /// Mean squared error restricted to masked sequence positions
    /// (mask\[t\] = true). Mean over batch x masked-positions x channels.
    pub fn masked_mse(&mut self, pred: Var, target: Var, mask: &[bool]) -> Result<Var> {
        let pv = self.value(pred);
        let tv = self.value(target);
        if pv.shape() != tv.shape() {
            return Err(Error::shape(format!("masked_mse: {:?} vs {:?}", pv.shape(), tv.shape())));
        }
        if pv.rank() != 3 || pv.dim(1) != mask.len() {
            return Err(Error::shape(format!(
                "masked_mse: mask len {} vs sequence {}",
                mask.len(),
                pv.dim(1)
            )));
        }
        let cnt = mask.iter().filter(|&&m| m).count();
        if cnt == 0 {
            return Err(Error::contract("masked_mse: empty mask has no trainable positions".to_string()));
        }
        let (b, l, c) = (pv.dim(0), pv.dim(1), pv.dim(2));
        let denom = (b * cnt * c) as f64;
        let mut s = 0.0;
        for bi in 0..b {
            for (t, &m) in mask.iter().enumerate().take(l) {
                if !m {
                    continue;
                }
                for ci in 0..c {
                    let d = pv.at3(bi, t, ci) - tv.at3(bi, t, ci);
                    s += d * d;
                }
            }
        }
        let needs = self.ng(pred) || self.ng(target);
        Ok(self.push(
            Tensor::scalar(s / denom),
            Op::MaskedMse { pred, target, mask: mask.to_vec(), denom },
            needs,
        ))
    }

    /// Closed-form KL( N(mu, sigma^2) || N(0, 1) ), summed over the feature
    /// axis and averaged over the remaining rows.
    pub fn kl_gauss(&mut self, mu: Var, logvar: Var) -> Var {
        let mv = self.value(mu);
        let lv = self.value(logvar);
        assert_eq!(mv.shape(), lv.shape(), "kl_gauss: shape mismatch");
        let c = *mv.shape().last().unwrap();
        let rows = (mv.numel() / c) as f64;
        let s: f64 = mv
            .data()
            .iter()
            .zip(lv.data())
            .map(|(&m, &l)| 0.5 * (m * m + l.exp() - 1.0 - l))
            .sum();
        let needs = self.ng(mu) || self.ng(logvar);
        self.push(Tensor::scalar(s / rows), Op::KlGauss { mu, logvar }, needs)
    }

    // ---- backward ----

    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).numel(), 1, "backward expects a scalar loss");
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                self.grads[i] = None;
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
    }

    /// Gradients of all registered params, in registration order.
    pub fn param_grads(&self) -> Vec<Option<Tensor>> {
        self.param_vars.iter().map(|v| self.grads.get(v.0).and_then(|g| g.clone())).collect()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn accum(&mut self, v: Var, delta: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                debug_assert_eq!(g.shape(), delta.shape());
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn backprop_node(&mut self, i: usize, g: &Tensor) {
        // Ops are matched by value patterns that clone the small bits they
        // need, so `self` stays free for accum calls.
        enum Delta {
            One(Var, Tensor),
            Two(Var, Tensor, Var, Tensor),
            Many(Vec<(Var, Tensor)>),
            None,
        }
        let deltas = match &self.nodes[i].op {
            Op::Leaf | Op::Param => Delta::None,
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                let ga = reduce_to(g, self.value(a).shape());
                let gb = reduce_to(g, self.value(b).shape());
                Delta::Two(a, ga, b, gb)
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let av = self.value(a);
                let bv = self.value(b);
                let ga_full = broadcast_binary(g, bv, |x, y| x * y);
                let gb_full = broadcast_binary(g, av, |x, y| x * y);
                let ga = reduce_to(&ga_full, av.shape());
                let gb = reduce_to(&gb_full, bv.shape());
                Delta::Two(a, ga, b, gb)
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                Delta::One(a, g.map(|x| x * c))
            }
            Op::Gelu(a) => {
                let a = *a;
                let xv = self.value(a);
                let mut d = g.clone();
                for (gd, &x) in d.data_mut().iter_mut().zip(xv.data()) {
                    *gd *= gelu_grad(x);
                }
                Delta::One(a, d)
            }
            Op::Exp(a) => {
                let a = *a;
                let yv = &self.nodes[i].value;
                let mut d = g.clone();
                for (gd, &y) in d.data_mut().iter_mut().zip(yv.data()) {
                    *gd *= y;
                }
                Delta::One(a, d)
            }
            Op::Clamp { x, lo, hi } => {
                let (x, lo, hi) = (*x, *lo, *hi);
                let xv = self.value(x);
                let mut d = g.clone();
                for (gd, &xx) in d.data_mut().iter_mut().zip(xv.data()) {
                    if xx < lo || xx > hi {
                        *gd = 0.0;
                    }
                }
                Delta::One(x, d)
            }
            Op::Linear { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let xv = self.value(x);
                let wv = self.value(w);
                let cin = wv.dim(0);
                let cout = wv.dim(1);
                let rows = xv.numel() / cin;
                // dx = g @ w^T
                let mut dx = vec![0.0; rows * cin];
                gemm(rows, cout, cin, g.data(), false, wv.data(), true, &mut dx, false);
                // dw = x^T @ g
                let mut dw = vec![0.0; cin * cout];
                gemm(cin, rows, cout, xv.data(), true, g.data(), false, &mut dw, false);
                // db = column sums of g
                let mut db = vec![0.0; cout];
                for r in 0..rows {
                    for c in 0..cout {
                        db[c] += g.data()[r * cout + c];
                    }
                }
                Delta::Many(vec![
                    (x, Tensor::new(xv.shape().to_vec(), dx)),
                    (w, Tensor::new(vec![cin, cout], dw)),
                    (b, Tensor::new(vec![cout], db)),
                ])
            }
            Op::Conv1dSame { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let xv = self.value(x);
                let wv = self.value(w);
                let (bsz, l) = (xv.dim(0), xv.dim(1));
                let c = wv.dim(0);
                let kw = wv.dim(1);
                let half = kw / 2;
                let mut dx = vec![0.0; bsz * l];
                let mut dw = vec![0.0; c * kw];
                let mut db = vec![0.0; c];
                let xd = xv.data();
                let wd = wv.data();
                for bi in 0..bsz {
                    for t in 0..l {
                        for ci in 0..c {
                            let gd = g.data()[(bi * l + t) * c + ci];
                            db[ci] += gd;
                            for j in 0..kw {
                                let ti = t as isize + j as isize - half as isize;
                                if ti >= 0 && (ti as usize) < l {
                                    dw[ci * kw + j] += gd * xd[bi * l + ti as usize];
                                    dx[bi * l + ti as usize] += gd * wd[ci * kw + j];
                                }
                            }
                        }
                    }
                }
                Delta::Many(vec![
                    (x, Tensor::new(vec![bsz, l, 1], dx)),
                    (w, Tensor::new(vec![c, kw], dw)),
                    (b, Tensor::new(vec![c], db)),
                ])
            }
            Op::LayerNorm { x, cache } => {
                let x = *x;
                let cache = cache.as_ref().expect("layer norm cache missing");
                let yv = &self.nodes[i].value;
                let c = *yv.shape().last().unwrap();
                let rows = yv.numel() / c;
                let mut dx = vec![0.0; yv.numel()];
                for r in 0..rows {
                    let y = &yv.data()[r * c..(r + 1) * c];
                    let gr = &g.data()[r * c..(r + 1) * c];
                    let mean_g = gr.iter().sum::<f64>() / c as f64;
                    let mean_gy = gr.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for k in 0..c {
                        dx[r * c + k] = cache.rstd[r] * (gr[k] - mean_g - y[k] * mean_gy);
                    }
                }
                Delta::One(x, Tensor::new(yv.shape().to_vec(), dx))
            }
            Op::Attention { x, wqkv, bqkv, wo, bo, heads, cache } => {
                let (x, wqkv, bqkv, wo, bo, heads) = (*x, *wqkv, *bqkv, *wo, *bo, *heads);
                let cache = cache.as_ref().expect("attention cache missing");
                let grads = mhsa_backward(
                    self.value(x),
                    self.value(wqkv),
                    self.value(wo),
                    heads,
                    cache,
                    g,
                );
                let [dx, dwqkv, dbqkv, dwo, dbo] = grads;
                Delta::Many(vec![(x, dx), (wqkv, dwqkv), (bqkv, dbqkv), (wo, dwo), (bo, dbo)])
            }
            Op::MeanSeq(x) => {
                let x = *x;
                let xv = self.value(x);
                let (b, s, c) = (xv.dim(0), xv.dim(1), xv.dim(2));
                let mut dx = vec![0.0; xv.numel()];
                for bi in 0..b {
                    for si in 0..s {
                        for ci in 0..c {
                            dx[(bi * s + si) * c + ci] = g.data()[bi * c + ci] / s as f64;
                        }
                    }
                }
                Delta::One(x, Tensor::new(vec![b, s, c], dx))
            }
            Op::Expand { x } => {
                let x = *x;
                Delta::One(x, reduce_to(g, self.value(x).shape()))
            }
            Op::Reshape { x } => {
                let x = *x;
                let shape = self.value(x).shape().to_vec();
                Delta::One(x, g.reshape(&shape).unwrap())
            }
            Op::SumLast(x) => {
                let x = *x;
                let xv = self.value(x);
                let c = *xv.shape().last().unwrap();
                let rows = xv.numel() / c;
                let mut dx = vec![0.0; xv.numel()];
                for r in 0..rows {
                    for k in 0..c {
                        dx[r * c + k] = g.data()[r];
                    }
                }
                Delta::One(x, Tensor::new(xv.shape().to_vec(), dx))
            }
            Op::ConcatLast(parts) => {
                let parts = parts.clone();
                let total = *self.nodes[i].value.shape().last().unwrap();
                let rows = self.nodes[i].value.numel() / total;
                let mut out = Vec::with_capacity(parts.len());
                let mut off = 0;
                for &p in &parts {
                    let w = *self.value(p).shape().last().unwrap();
                    let mut d = vec![0.0; rows * w];
                    for r in 0..rows {
                        d[r * w..(r + 1) * w]
                            .copy_from_slice(&g.data()[r * total + off..r * total + off + w]);
                    }
                    out.push((p, Tensor::new(self.value(p).shape().to_vec(), d)));
                    off += w;
                }
                Delta::Many(out)
            }
            Op::ConcatBatch(parts) => {
                let parts = parts.clone();
                let mut out = Vec::with_capacity(parts.len());
                let mut off = 0;
                for &p in &parts {
                    let n = self.value(p).numel();
                    let d = g.data()[off..off + n].to_vec();
                    out.push((p, Tensor::new(self.value(p).shape().to_vec(), d)));
                    off += n;
                }
                Delta::Many(out)
            }
            Op::SliceLast { x, start, len } => {
                let (x, start, len) = (*x, *start, *len);
                let xv = self.value(x);
                let c = *xv.shape().last().unwrap();
                let rows = xv.numel() / c;
                let mut dx = vec![0.0; xv.numel()];
                for r in 0..rows {
                    dx[r * c + start..r * c + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                Delta::One(x, Tensor::new(xv.shape().to_vec(), dx))
            }
            Op::Bandlimit { x, keep } => {
                let x = *x;
                let keep = keep.clone();
                let gv = g;
                let (b, l, c) = (gv.dim(0), gv.dim(1), gv.dim(2));
                let nb = l / 2 + 1;
                let tables = TrigTables::new(l);
                let mut dx = vec![0.0; gv.numel()];
                let mut series = vec![0.0; l];
                for bi in 0..b {
                    for ci in 0..c {
                        for t in 0..l {
                            series[t] = gv.at3(bi, t, ci);
                        }
                        let kb = &keep[(bi * c + ci) * nb..(bi * c + ci + 1) * nb];
                        let proj = project_bins(&series, &tables, kb);
                        for t in 0..l {
                            dx[gv.idx3(bi, t, ci)] = proj[t];
                        }
                    }
                }
                Delta::One(x, Tensor::new(vec![b, l, c], dx))
            }
            Op::Mse { a, b } => {
                let (a, b) = (*a, *b);
                let av = self.value(a);
                let bv = self.value(b);
                let n = av.numel() as f64;
                let s = g.item() * 2.0 / n;
                let da: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, y)| s * (x - y)).collect();
                let db: Vec<f64> = da.iter().map(|&d| -d).collect();
                Delta::Two(
                    a,
                    Tensor::new(av.shape().to_vec(), da),
                    b,
                    Tensor::new(bv.shape().to_vec(), db),
                )
            }
            Op::MaskedMse { pred, target, mask, denom } => {
                let (pred, target, denom) = (*pred, *target, *denom);
                let mask = mask.clone();
                let pv = self.value(pred);
                let tv = self.value(target);
                let (b, l, c) = (pv.dim(0), pv.dim(1), pv.dim(2));
                let s = g.item() * 2.0 / denom;
                let mut dp = vec![0.0; pv.numel()];
                for bi in 0..b {
                    for (t, &m) in mask.iter().enumerate().take(l) {
                        if !m {
                            continue;
                        }
                        for ci in 0..c {
                            let idx = (bi * l + t) * c + ci;
                            dp[idx] = s * (pv.data()[idx] - tv.data()[idx]);
                        }
                    }
                }
                let dt: Vec<f64> = dp.iter().map(|&d| -d).collect();
                Delta::Two(
                    pred,
                    Tensor::new(pv.shape().to_vec(), dp),
                    target,
                    Tensor::new(tv.shape().to_vec(), dt),
                )
            }
            Op::KlGauss { mu, logvar } => {
                let (mu, logvar) = (*mu, *logvar);
                let mv = self.value(mu);
                let lv = self.value(logvar);
                let c = *mv.shape().last().unwrap();
                let rows = (mv.numel() / c) as f64;
                let s = g.item() / rows;
                let dmu: Vec<f64> = mv.data().iter().map(|&m| s * m).collect();
                let dlv: Vec<f64> = lv.data().iter().map(|&l| s * 0.5 * (l.exp() - 1.0)).collect();
                Delta::Two(
                    mu,
                    Tensor::new(mv.shape().to_vec(), dmu),
                    logvar,
                    Tensor::new(lv.shape().to_vec(), dlv),
                )
            }
        };
        match deltas {
            Delta::None => {}
            Delta::One(v, d) => self.accum(v, d),
            Delta::Two(a, da, b, db) => {
                self.accum(a, da);
                self.accum(b, db);
            }
            Delta::Many(list) => {
                for (v, d) in list {
                    self.accum(v, d);
                }
            }
        }
    }
}

const LN_EPS: f64 = 1e-5;

fn gelu_fwd(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

// ---- broadcasting helpers ----

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    assert_eq!(a.len(), b.len(), "broadcast requires equal rank: {a:?} vs {b:?}");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            assert!(x == y || x == 1 || y == 1, "incompatible broadcast {a:?} vs {b:?}");
            x.max(y)
        })
        .collect()
}

fn strides_for(shape: &[usize], out: &[usize]) -> Vec<usize> {
    // standard row-major strides, zeroed on broadcast axes
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        if shape[i] == out[i] {
            strides[i] = if shape[i] == 1 { 0 } else { acc };
        } else {
            strides[i] = 0;
        }
        acc *= shape[i];
    }
    strides
}

fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    if a.rank() == 0 || b.rank() == 0 {
        // scalar against anything
        if a.rank() == 0 {
            let s = a.item();
            return b.map(|y| f(s, y));
        }
        let s = b.item();
        return a.map(|x| f(x, s));
    }
    let out_shape = broadcast_shape(a.shape(), b.shape());
    let sa = strides_for(a.shape(), &out_shape);
    let sb = strides_for(b.shape(), &out_shape);
    let n: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut out = Vec::with_capacity(n);
    let (ad, bd) = (a.data(), b.data());
    let mut oa = 0usize;
    let mut ob = 0usize;
    for _ in 0..n {
        out.push(f(ad[oa], bd[ob]));
        // odometer increment
        for d in (0..rank).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
        }
    }
    Tensor::new(out_shape, out)
}

fn broadcast_to(x: &Tensor, shape: &[usize]) -> Tensor {
    let zeros = Tensor::zeros(shape);
    broadcast_binary(x, &zeros, |a, _| a)
}

/// Sum `g` over the axes where `target` has extent 1 (or over leading
/// scalar-ness) so it matches `target`.
fn reduce_to(g: &Tensor, target: &[usize]) -> Tensor {
    if g.shape() == target {
        return g.clone();
    }
    if target.is_empty() {
        return Tensor::scalar(g.data().iter().sum());
    }
    assert_eq!(g.rank(), target.len(), "reduce_to rank mismatch");
    let mut out = Tensor::zeros(target);
    let st = strides_for(target, g.shape());
    let rank = g.rank();
    let mut idx = vec![0usize; rank];
    let mut ot = 0usize;
    let gd = g.data();
    let od = out.data_mut();
    for &gv in gd {
        od[ot] += gv;
        for d in (0..rank).rev() {
            idx[d] += 1;
            ot += st[d];
            if idx[d] < g.shape()[d] {
                break;
            }
            idx[d] = 0;
            ot -= st[d] * g.shape()[d];
        }
    }
    out
}

// ---- fused multi-head self-attention ----

fn mhsa_forward(
    x: &Tensor,
    wqkv: &Tensor,
    bqkv: &Tensor,
    wo: &Tensor,
    bo: &Tensor,
    heads: usize,
) -> (Tensor, AttnCache) {
    assert_eq!(x.rank(), 3, "attention input must be rank 3");
    let (n, s, e) = (x.dim(0), x.dim(1), x.dim(2));
    assert_eq!(wqkv.shape(), &[e, 3 * e], "wqkv shape");
    assert_eq!(wo.shape(), &[e, e], "wo shape");
    assert!(e % heads == 0, "heads must divide embedding dim");
    let dh = e / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // qkv projection over flattened rows
    let rows = n * s;
    let mut qkv = vec![0.0; rows * 3 * e];
    gemm(rows, e, 3 * e, x.data(), false, wqkv.data(), false, &mut qkv, false);
    for r in 0..rows {
        for c in 0..3 * e {
            qkv[r * 3 * e + c] += bqkv.data()[c];
        }
    }

    // split into (n, heads, s, dh) contiguous blocks
    let mut q = vec![0.0; n * e * s];
    let mut k = vec![0.0; n * e * s];
    let mut v = vec![0.0; n * e * s];
    for ni in 0..n {
        for si in 0..s {
            let base = (ni * s + si) * 3 * e;
            for h in 0..heads {
                for d in 0..dh {
                    let dst = ((ni * heads + h) * s + si) * dh + d;
                    q[dst] = qkv[base + h * dh + d];
                    k[dst] = qkv[base + e + h * dh + d];
                    v[dst] = qkv[base + 2 * e + h * dh + d];
                }
            }
        }
    }

    // scores + softmax + mix per (n, head)
    let mut probs = vec![0.0; n * heads * s * s];
    let mut ctx = vec![0.0; n * e * s]; // (n, heads, s, dh)
    let mut scores = vec![0.0; s * s];
    for b in 0..n * heads {
        let qb = &q[b * s * dh..(b + 1) * s * dh];
        let kb = &k[b * s * dh..(b + 1) * s * dh];
        let vb = &v[b * s * dh..(b + 1) * s * dh];
        gemm(s, dh, s, qb, false, kb, true, &mut scores, false);
        let pb = &mut probs[b * s * s..(b + 1) * s * s];
        for r in 0..s {
            let row = &mut scores[r * s..(r + 1) * s];
            let mut mx = f64::NEG_INFINITY;
            for val in row.iter_mut() {
                *val *= scale;
                mx = mx.max(*val);
            }
            let mut sum = 0.0;
            for val in row.iter_mut() {
                *val = (*val - mx).exp();
                sum += *val;
            }
            for (ci, val) in row.iter().enumerate() {
                pb[r * s + ci] = val / sum;
            }
        }
        gemm(s, s, dh, pb, false, vb, false, &mut ctx[b * s * dh..(b + 1) * s * dh], false);
    }

    // merge heads -> (n, s, e), output projection
    let mut merged = vec![0.0; rows * e];
    for ni in 0..n {
        for si in 0..s {
            for h in 0..heads {
                for d in 0..dh {
                    merged[(ni * s + si) * e + h * dh + d] = ctx[((ni * heads + h) * s + si) * dh + d];
                }
            }
        }
    }
    let mut out = vec![0.0; rows * e];
    gemm(rows, e, e, &merged, false, wo.data(), false, &mut out, false);
    for r in 0..rows {
        for c in 0..e {
            out[r * e + c] += bo.data()[c];
        }
    }
    (Tensor::new(vec![n, s, e], out), AttnCache { q, k, v, probs })
}

fn mhsa_backward(
    x: &Tensor,
    wqkv: &Tensor,
    wo: &Tensor,
    heads: usize,
    cache: &AttnCache,
    g: &Tensor,
) -> [Tensor; 5] {
    let (n, s, e) = (x.dim(0), x.dim(1), x.dim(2));
    let dh = e / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let rows = n * s;

    // recompute merged ctx for dwo
    let mut merged = vec![0.0; rows * e];
    for b in 0..n * heads {
        let pb = &cache.probs[b * s * s..(b + 1) * s * s];
        let vb = &cache.v[b * s * dh..(b + 1) * s * dh];
        let mut ctx = vec![0.0; s * dh];
        gemm(s, s, dh, pb, false, vb, false, &mut ctx, false);
        let (ni, h) = (b / heads, b % heads);
        for si in 0..s {
            for d in 0..dh {
                merged[(ni * s + si) * e + h * dh + d] = ctx[si * dh + d];
            }
        }
    }

    // output projection grads
    let mut dbo = vec![0.0; e];
    for r in 0..rows {
        for c in 0..e {
            dbo[c] += g.data()[r * e + c];
        }
    }
    let mut dwo = vec![0.0; e * e];
    gemm(e, rows, e, &merged, true, g.data(), false, &mut dwo, false);
    let mut dmerged = vec![0.0; rows * e];
    gemm(rows, e, e, g.data(), false, wo.data(), true, &mut dmerged, false);

    // per-head softmax/attention grads
    let mut dq = vec![0.0; n * e * s];
    let mut dk = vec![0.0; n * e * s];
    let mut dv = vec![0.0; n * e * s];
    let mut dctx = vec![0.0; s * dh];
    let mut dprobs = vec![0.0; s * s];
    let mut dscores = vec![0.0; s * s];
    for b in 0..n * heads {
        let (ni, h) = (b / heads, b % heads);
        for si in 0..s {
            for d in 0..dh {
                dctx[si * dh + d] = dmerged[(ni * s + si) * e + h * dh + d];
            }
        }
        let pb = &cache.probs[b * s * s..(b + 1) * s * s];
        let vb = &cache.v[b * s * dh..(b + 1) * s * dh];
        let qb = &cache.q[b * s * dh..(b + 1) * s * dh];
        let kb = &cache.k[b * s * dh..(b + 1) * s * dh];
        // dprobs = dctx @ v^T ; dv = probs^T @ dctx
        gemm(s, dh, s, &dctx, false, vb, true, &mut dprobs, false);
        gemm(s, s, dh, pb, true, &dctx, false, &mut dv[b * s * dh..(b + 1) * s * dh], false);
        // softmax backward per row
        for r in 0..s {
            let dot: f64 =
                (0..s).map(|c| dprobs[r * s + c] * pb[r * s + c]).sum();
            for c in 0..s {
                dscores[r * s + c] = pb[r * s + c] * (dprobs[r * s + c] - dot) * scale;
            }
        }
        // dq = dscores @ k ; dk = dscores^T @ q
        gemm(s, s, dh, &dscores, false, kb, false, &mut dq[b * s * dh..(b + 1) * s * dh], false);
        gemm(s, s, dh, &dscores, true, qb, false, &mut dk[b * s * dh..(b + 1) * s * dh], false);
    }

    // reassemble d_qkv (n, s, 3e)
    let mut dqkv = vec![0.0; rows * 3 * e];
    for ni in 0..n {
        for si in 0..s {
            let base = (ni * s + si) * 3 * e;
            for h in 0..heads {
                for d in 0..dh {
                    let src = ((ni * heads + h) * s + si) * dh + d;
                    dqkv[base + h * dh + d] = dq[src];
                    dqkv[base + e + h * dh + d] = dk[src];
                    dqkv[base + 2 * e + h * dh + d] = dv[src];
                }
            }
        }
    }
    let mut dbqkv = vec![0.0; 3 * e];
    for r in 0..rows {
        for c in 0..3 * e {
            dbqkv[c] += dqkv[r * 3 * e + c];
        }
    }
    let mut dwqkv = vec![0.0; e * 3 * e];
    gemm(e, rows, 3 * e, x.data(), true, &dqkv, false, &mut dwqkv, false);
    let mut dx = vec![0.0; rows * e];
    gemm(rows, 3 * e, e, &dqkv, false, wqkv.data(), true, &mut dx, false);

    [
        Tensor::new(vec![n, s, e], dx),
        Tensor::new(vec![e, 3 * e], dwqkv),
        Tensor::new(vec![3 * e], dbqkv),
        Tensor::new(vec![e, e], dwo),
        Tensor::new(vec![e], dbo),
    ]
}

/// Row-softmax attention probabilities for an input batch; used by tests to
/// check normalization without reaching into the tape.
pub fn attention_probs(
    x: &Tensor,
    wqkv: &Tensor,
    bqkv: &Tensor,
    wo: &Tensor,
    bo: &Tensor,
    heads: usize,
) -> Tensor {
    let (_, cache) = mhsa_forward(x, wqkv, bqkv, wo, bo, heads);
    let (n, s) = (x.dim(0), x.dim(1));
    Tensor::new(vec![n * heads, s, s], cache.probs)
}

// ---- discrete real-frequency transform helpers ----

struct TrigTables {
    l: usize,
    nb: usize,
    cos: Vec<f64>, // [f * l + t]
    sin: Vec<f64>,
}

impl TrigTables {
    fn new(l: usize) -> Self {
        let nb = l / 2 + 1;
        let mut cos = vec![0.0; nb * l];
        let mut sin = vec![0.0; nb * l];
        for f in 0..nb {
            for t in 0..l {
                let ang = 2.0 * std::f64::consts::PI * (f * t) as f64 / l as f64;
                cos[f * l + t] = ang.cos();
                sin[f * l + t] = ang.sin();
            }
        }
        TrigTables { l, nb, cos, sin }
    }

    fn spectrum(&self, x: &[f64], re: &mut [f64], im: &mut [f64]) {
        for f in 0..self.nb {
            let (mut r, mut i) = (0.0, 0.0);
            for t in 0..self.l {
                r += x[t] * self.cos[f * self.l + t];
                i -= x[t] * self.sin[f * self.l + t];
            }
            re[f] = r;
            im[f] = i;
        }
    }
}

fn select_top_bins(x: &[f64], tables: &TrigTables, m_top: usize, keep: &mut [bool]) {
    let nb = tables.nb;
    let mut re = vec![0.0; nb];
    let mut im = vec![0.0; nb];
    tables.spectrum(x, &mut re, &mut im);
    let mut order: Vec<usize> = (0..nb).collect();
    order.sort_by(|&a, &b| {
        let ma = re[a] * re[a] + im[a] * im[a];
        let mb = re[b] * re[b] + im[b] * im[b];
        mb.partial_cmp(&ma).unwrap().then(a.cmp(&b))
    });
    keep.iter_mut().for_each(|k| *k = false);
    for &f in order.iter().take(m_top.min(nb)) {
        keep[f] = true;
    }
}

/// Orthogonal projection of a series onto the kept frequency bins.
fn project_bins(x: &[f64], tables: &TrigTables, keep: &[bool]) -> Vec<f64> {
    let l = tables.l;
    let nb = tables.nb;
    let mut re = vec![0.0; nb];
    let mut im = vec![0.0; nb];
    tables.spectrum(x, &mut re, &mut im);
    let mut out = vec![0.0; l];
    for f in 0..nb {
        if !keep[f] {
            continue;
        }
        let w = if f == 0 || 2 * f == l { 1.0 } else { 2.0 };
        let (r, i) = (re[f], im[f]);
        for (t, o) in out.iter_mut().enumerate() {
            *o += w / l as f64 * (r * tables.cos[f * l + t] - i * tables.sin[f * l + t]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;

    /// Central finite differences against the analytic tape gradients for a
    /// loss built by `build` over the given parameter tensors.
    fn fd_check(params: &[Tensor], build: &dyn Fn(&mut Graph, &[Var]) -> Var, tol: f64) {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param(p)).collect();
        let loss = build(&mut g, &vars);
        g.backward(loss);
        let analytic = g.param_grads();

        for (pi, p) in params.iter().enumerate() {
            let an = analytic[pi].as_ref().expect("missing grad");
            for j in 0..p.numel() {
                let eps = 1e-5 * p.data()[j].abs().max(1.0);
                let eval = |delta: f64| {
                    let mut ps: Vec<Tensor> = params.to_vec();
                    ps[pi].data_mut()[j] += delta;
                    let mut g2 = Graph::new();
                    let vs: Vec<Var> = ps.iter().map(|p| g2.param(p)).collect();
                    let l = build(&mut g2, &vs);
                    g2.value(l).item()
                };
                let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let a = an.data()[j];
                let mag = a.abs().max(fd.abs());
                if mag < 5e-8 {
                    // both numerically zero; FD noise dominates here
                    continue;
                }
                assert!(
                    ((a - fd) / mag).abs() < tol,
                    "param {pi} comp {j}: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    fn rt(shape: &[usize], tag: &str) -> Tensor {
        let mut rng = seeds::stream(11, tag, 0);
        Tensor::randn(shape, &mut rng)
    }

    #[test]
    fn fd_add_mul_broadcast() {
        let a = rt(&[2, 3, 4], "a");
        let b = rt(&[2, 1, 4], "b");
        let c = rt(&[1, 3, 1], "c");
        let t = rt(&[2, 3, 4], "t");
        fd_check(&[a, b, c], &|g, vs| {
            let s = g.add(vs[0], vs[1]);
            let m = g.mul(s, vs[2]);
            let target = g.leaf(t.clone());
            g.mse(m, target)
        }, 1e-6);
    }

    #[test]
    fn fd_linear_gelu() {
        let x = rt(&[2, 3, 4], "x");
        let w = rt(&[4, 5], "w");
        let b = rt(&[5], "b");
        let t = rt(&[2, 3, 5], "t");
        fd_check(&[x, w, b], &|g, vs| {
            let y = g.linear(vs[0], vs[1], vs[2]);
            let y = g.gelu(y);
            let target = g.leaf(t.clone());
            g.mse(y, target)
        }, 1e-6);
    }

    #[test]
    fn fd_conv_layernorm() {
        let x = rt(&[2, 6, 1], "x");
        let w = rt(&[4, 3], "w");
        let b = rt(&[4], "b");
        let t = rt(&[2, 6, 4], "t");
        fd_check(&[x, w, b], &|g, vs| {
            let y = g.conv1d_same(vs[0], vs[1], vs[2]);
            let y = g.layer_norm(y);
            let target = g.leaf(t.clone());
            g.mse(y, target)
        }, 1e-6);
    }

    #[test]
    fn fd_attention() {
        let e = 6;
        let x = rt(&[2, 5, e], "x");
        let wqkv = rt(&[e, 3 * e], "wqkv").map(|v| v * 0.5);
        let bqkv = rt(&[3 * e], "bqkv").map(|v| v * 0.1);
        let wo = rt(&[e, e], "wo").map(|v| v * 0.5);
        let bo = rt(&[e], "bo").map(|v| v * 0.1);
        let t = rt(&[2, 5, e], "t");
        fd_check(&[x, wqkv, bqkv, wo, bo], &|g, vs| {
            let y = g.attention(vs[0], vs[1], vs[2], vs[3], vs[4], 2);
            let target = g.leaf(t.clone());
            g.mse(y, target)
        }, 1e-5);
    }

    #[test]
    fn fd_shape_ops() {
        let x = rt(&[2, 4, 3], "x");
        let t = rt(&[2, 1, 1], "t");
        fd_check(&[x], &|g, vs| {
            let m = g.mean_seq(vs[0]);
            let e = g.expand(m, &[2, 4, 3]);
            let r = g.reshape(e, &[2, 4, 3]);
            let s = g.slice_last(r, 1, 2);
            let cat = g.concat_last(&[s, s]);
            let sum = g.sum_last(cat);
            let pooled = g.mean_seq(sum);
            let target = g.leaf(t.clone());
            g.mse(pooled, target)
        }, 1e-6);
    }

    #[test]
    fn fd_concat_batch_clamp_exp() {
        let a = rt(&[1, 3, 2], "a");
        let b = rt(&[2, 3, 2], "b");
        let t = rt(&[3, 3, 2], "t");
        fd_check(&[a, b], &|g, vs| {
            let cat = g.concat_batch(&[vs[0], vs[1]]);
            let cl = g.clamp(cat, -0.8, 0.8);
            let ex = g.exp(cl);
            let target = g.leaf(t.clone());
            g.mse(ex, target)
        }, 1e-5);
    }

    #[test]
    fn fd_bandlimit_and_losses() {
        let x = rt(&[2, 8, 3], "x");
        let mu = rt(&[2, 1, 4], "mu");
        let lv = rt(&[2, 1, 4], "lv").map(|v| v * 0.3);
        let t = rt(&[2, 8, 3], "t");
        let mask = vec![true, false, true, true, false, false, true, false];
        fd_check(&[x, mu, lv], &|g, vs| {
            let bl = g.bandlimit(vs[0], 3);
            let target = g.leaf(t.clone());
            let l1 = g.masked_mse(bl, target, &mask).unwrap();
            let l2 = g.kl_gauss(vs[1], vs[2]);
            let l2s = g.scale(l2, 0.7);
            g.add(l1, l2s)
        }, 1e-6);
    }

    #[test]
    fn bandlimit_full_spectrum_is_identity() {
        let x = rt(&[2, 16, 3], "x");
        let mut g = Graph::new();
        let v = g.leaf(x.clone());
        let y = g.bandlimit(v, 16 / 2 + 1);
        let max_diff = x
            .data()
            .iter()
            .zip(g.value(y).data())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(max_diff < 1e-10, "full-spectrum bandlimit deviates by {max_diff}");
    }

    #[test]
    fn bandlimit_keeps_constant_signal() {
        let x = Tensor::full(&[1, 12, 1], 0.37);
        let mut g = Graph::new();
        let v = g.leaf(x.clone());
        let y = g.bandlimit(v, 1);
        for &val in g.value(y).data() {
            assert!((val - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let e = 8;
        let x = rt(&[3, 7, e], "x");
        let p = attention_probs(
            &x,
            &rt(&[e, 3 * e], "wqkv"),
            &rt(&[3 * e], "bqkv"),
            &rt(&[e, e], "wo"),
            &rt(&[e], "bo"),
            2,
        );
        let s = p.dim(1);
        for b in 0..p.dim(0) {
            for r in 0..s {
                let sum: f64 = (0..s).map(|c| p.at3(b, r, c)).sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn masked_mse_rejects_empty_mask() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[1, 4, 2]));
        let b = g.leaf(Tensor::zeros(&[1, 4, 2]));
        assert!(g.masked_mse(a, b, &[false; 4]).is_err());
    }
}
