//! The composite model: backbone + prompt networks + frozen VAEs, and the
//! full forward/loss builders shared by training, gradient verification, and
//! sampling.

use crate::backbone::{
    add_embeddings_g, denoise_tokens_g, detokenize_g, tokenize_g, ModelConfig, ModelParams,
};
use crate::datagen::{DataKind, EnvFeature, SeriesSample};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::masking::MaskSpec;
use crate::params::Bound;
use crate::prompt_net::{assemble_g, feature_g, periodic_g, temporal_g, PromptParams};
use crate::schedule::NoiseSchedule;
use crate::semantic_vae::{encode_graph, EncodeMode, VaeSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub backbone: ModelParams,
    pub prompt: PromptParams,
    pub vaes: VaeSet,
}

impl Model {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        Ok(Model {
            cfg,
            backbone: ModelParams::init(&cfg, seed),
            prompt: PromptParams::init(cfg.c0, cfg.c_cond, cfg.m_top, cfg.n_heads, cfg.ff_mult, cfg.feat_dim, seed ^ 0x9e37),
            vaes: VaeSet::init(cfg.c0, cfg.vae_hidden, seed ^ 0x7f4a),
        })
    }
}

/// Bound graph handles for every component store. Foundation stores
/// (backbone + prompt) and VAE stores can be made trainable independently;
/// gradient collection order is backbone, prompt, then the VAEs in kind
/// order.
pub struct ModelVars {
    pub backbone: Bound,
    pub prompt: Bound,
    pub vae_bs: Bound,
    pub vae_app: Bound,
    pub vae_rsrp: Bound,
}

impl ModelVars {
    pub fn vae(&self, kind: DataKind) -> &Bound {
        match kind {
            DataKind::BsTraffic => &self.vae_bs,
            DataKind::AppTraffic => &self.vae_app,
            DataKind::Rsrp => &self.vae_rsrp,
        }
    }
}

pub fn bind_model(g: &mut Graph, m: &Model, train_foundation: bool, train_vaes: bool) -> ModelVars {
    ModelVars {
        backbone: m.backbone.store.bind(g, train_foundation),
        prompt: m.prompt.store.bind(g, train_foundation),
        vae_bs: m.vaes.bs.store.bind(g, train_vaes),
        vae_app: m.vaes.app.store.bind(g, train_vaes),
        vae_rsrp: m.vaes.rsrp.store.bind(g, train_vaes),
    }
}

/// A batch of samples ordered so same-kind samples are contiguous (the env
/// encoders run per kind and the results are concatenated along the batch).
#[derive(Clone, Debug)]
pub struct Batch {
    pub series: Tensor,
    pub envs: Vec<EnvFeature>,
    pub kinds: Vec<DataKind>,
}

impl Batch {
    pub fn from_samples(samples: &[&SeriesSample], l: usize) -> Result<Batch> {
        if samples.is_empty() {
            return Err(Error::invalid("empty batch".to_string()));
        }
        let mut ordered: Vec<&SeriesSample> = samples.to_vec();
        ordered.sort_by_key(|s| s.kind.code());
        let b = ordered.len();
        let mut series = Tensor::zeros(&[b, l, 1]);
        let mut envs = Vec::with_capacity(b);
        let mut kinds = Vec::with_capacity(b);
        for (i, s) in ordered.iter().enumerate() {
            if s.values.len() != l {
                return Err(Error::shape(format!("sample {} has length {}, batch expects {l}", s.sample_id, s.values.len())));
            }
            series.data_mut()[i * l..(i + 1) * l].copy_from_slice(&s.values);
            envs.push(s.env.clone());
            kinds.push(s.kind);
        }
        Ok(Batch { series, envs, kinds })
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    /// Contiguous same-kind runs as (kind, start, end).
    fn kind_runs(&self) -> Vec<(DataKind, usize, usize)> {
        let mut runs = Vec::new();
        let mut start = 0;
        for i in 1..=self.kinds.len() {
            if i == self.kinds.len() || self.kinds[i] != self.kinds[start] {
                runs.push((self.kinds[start], start, i));
                start = i;
            }
        }
        runs
    }
}

/// Deterministic (posterior-mean) env embeddings for a mixed batch,
/// concatenated back into (B, L, C0).
pub(crate) fn encode_envs_g(g: &mut Graph, m: &Model, vars: &ModelVars, batch: &Batch, l: usize) -> Result<Var> {
    let mut parts = Vec::new();
    for (kind, start, end) in batch.kind_runs() {
        let envs: Vec<&EnvFeature> = batch.envs[start..end].iter().collect();
        let out = encode_graph(g, m.vaes.get(kind), vars.vae(kind), &envs, l, EncodeMode::Deterministic)?;
        parts.push(out.e_tiled);
    }
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        Ok(g.concat_batch(&parts))
    }
}

/// Everything the masked training loss needs for one step.
pub struct LossInputs<'a> {
    pub batch: &'a Batch,
    /// One diffusion step per batch element.
    pub ks: &'a [usize],
    /// Forward noise, (B, L, C0).
    pub eps: &'a Tensor,
    pub mask: &'a MaskSpec,
    pub lambda_rec: f64,
    /// Test hook: bypass the denoiser and score the true noise.
    pub force_eps_hat_equals_eps: bool,
}

pub struct LossVars {
    pub total: Var,
    pub denoise: Var,
    pub recon: Var,
    pub eps_hat: Var,
}

/// Build the full training loss:
/// tokenize -> forward-perturb -> mask-mix -> embed -> prompts -> denoise,
/// masked noise MSE plus `lambda_rec` times the detokenizer reconstruction.
pub fn foundation_loss_g(
    g: &mut Graph,
    m: &Model,
    vars: &ModelVars,
    inp: &LossInputs,
    sched: &NoiseSchedule,
) -> Result<LossVars> {
    let b = inp.batch.len();
    let l = m.cfg.l;
    if inp.ks.len() != b {
        return Err(Error::invalid("one diffusion step per batch element required".to_string()));
    }
    if inp.eps.shape() != [b, l, m.cfg.c0] {
        return Err(Error::shape(format!("eps shape {:?}", inp.eps.shape())));
    }
    if inp.mask.len() != l {
        return Err(Error::shape("mask length != L".to_string()));
    }
    for &k in inp.ks {
        if k >= sched.k() {
            return Err(Error::invalid(format!("diffusion step {k} out of range")));
        }
    }

    let series = g.leaf(inp.batch.series.clone());
    let x0 = tokenize_g(g, series, &m.backbone, &vars.backbone);

    // forward perturbation with per-element coefficients
    let ca = Tensor::new(vec![b, 1, 1], inp.ks.iter().map(|&k| sched.alpha_bar[k].sqrt()).collect());
    let cb = Tensor::new(vec![b, 1, 1], inp.ks.iter().map(|&k| (1.0 - sched.alpha_bar[k]).sqrt()).collect());
    let ca = g.leaf(ca);
    let cb = g.leaf(cb);
    let eps = g.leaf(inp.eps.clone());
    let x0_scaled = g.mul(x0, ca);
    let eps_scaled = g.mul(eps, cb);
    let xk = g.add(x0_scaled, eps_scaled);

    // mix: noisy where predicted, clean where observed
    let maskf = Tensor::new(
        vec![1, l, 1],
        inp.mask.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
    );
    let maskinv = maskf.map(|v| 1.0 - v);
    let mf = g.leaf(maskf);
    let mi = g.leaf(maskinv);
    let xk_m = g.mul(xk, mf);
    let x0_m = g.mul(x0, mi);
    let mixed = g.add(xk_m, x0_m);

    // input acquisition and prompts
    let z = add_embeddings_g(g, mixed, inp.ks, &m.backbone, &vars.backbone);
    let e_env = encode_envs_g(g, m, vars, inp.batch, l)?;
    let wp = periodic_g(g, z, &m.prompt, &vars.prompt);
    let wt = temporal_g(g, z, &m.prompt, &vars.prompt);
    let wf = feature_g(g, z, &m.prompt, &vars.prompt);
    let prompt = assemble_g(g, e_env, wp, wt, wf, &m.prompt, &vars.prompt);

    let eps_hat = if inp.force_eps_hat_equals_eps {
        eps
    } else {
        denoise_tokens_g(g, z, prompt, &m.backbone, &vars.backbone, m.cfg.n_heads, m.cfg.per_position_modulation)
    };

    let denoise = g.masked_mse(eps_hat, eps, &inp.mask.mask)?;
    let recon_series = detokenize_g(g, x0, &m.backbone, &vars.backbone);
    let recon = g.mse(recon_series, series);
    let recon_scaled = g.scale(recon, inp.lambda_rec);
    let total = g.add(denoise, recon_scaled);
    Ok(LossVars { total, denoise, recon, eps_hat })
}

/// One frozen-model denoiser evaluation for sampling: every row shares the
/// same diffusion step `k` and the prompt is rebuilt from the current state.
pub fn predict_eps_for_state(m: &Model, state: &Tensor, k: usize, batch: &Batch) -> Result<Tensor> {
    let b = state.dim(0);
    if batch.len() != b {
        return Err(Error::shape("state batch and env batch disagree".to_string()));
    }
    let ks = vec![k; b];
    let mut g = Graph::new();
    let vars = bind_model(&mut g, m, false, false);
    let x = g.leaf(state.clone());
    let z = add_embeddings_g(&mut g, x, &ks, &m.backbone, &vars.backbone);
    let e_env = encode_envs_g(&mut g, m, &vars, batch, m.cfg.l)?;
    let wp = periodic_g(&mut g, z, &m.prompt, &vars.prompt);
    let wt = temporal_g(&mut g, z, &m.prompt, &vars.prompt);
    let wf = feature_g(&mut g, z, &m.prompt, &vars.prompt);
    let prompt = assemble_g(&mut g, e_env, wp, wt, wf, &m.prompt, &vars.prompt);
    let eps_hat = denoise_tokens_g(&mut g, z, prompt, &m.backbone, &vars.backbone, m.cfg.n_heads, m.cfg.per_position_modulation);
    let out = g.value(eps_hat).clone();
    if !out.is_finite() {
        return Err(Error::numeric(format!("non-finite denoiser output at step {k}")));
    }
    Ok(out)
}

/// Tokenize a batch of series without gradients.
pub fn tokenize_batch(m: &Model, series: &Tensor) -> Result<Tensor> {
    crate::backbone::tokenize(series, &m.backbone)
}

/// Detokenize a token batch without gradients.
pub fn detokenize_batch(m: &Model, tokens: &Tensor) -> Result<Tensor> {
    crate::backbone::detokenize(tokens, &m.backbone)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_app_traffic, gen_bs_traffic, gen_rsrp};
    
    use crate::schedule::build_schedule;
    use crate::seeds;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig { l: 16, c0: 8, c_cond: 8, n_blocks: 1, n_heads: 2, ff_mult: 2, feat_dim: 4, vae_hidden: 8, ..Default::default() }
    }

    fn mixed_batch(l: usize) -> Batch {
        let bs = gen_bs_traffic(1, 1, l).unwrap();
        let app = gen_app_traffic(1, 1, l).unwrap();
        let rs = gen_rsrp(1, 1, l).unwrap();
        let refs: Vec<&SeriesSample> = vec![&app[0], &rs[0], &bs[0]];
        Batch::from_samples(&refs, l).unwrap()
    }

    #[test]
    fn batch_sorts_by_kind() {
        let b = mixed_batch(16);
        assert_eq!(b.kinds, vec![DataKind::BsTraffic, DataKind::AppTraffic, DataKind::Rsrp]);
        assert_eq!(b.kind_runs().len(), 3);
    }

    #[test]
    fn loss_builds_and_is_finite_on_mixed_batch() {
        let m = Model::init(tiny_cfg(), 7).unwrap();
        let sched = build_schedule(10, 1e-3, 0.05).unwrap();
        let batch = mixed_batch(16);
        let mut rng = seeds::stream(1, "model.test", 0);
        let eps = Tensor::randn(&[3, 16, 8], &mut rng);
        let mask = MaskSpec::random(16, 0.5, &mut rng).unwrap();
        let mut g = Graph::new();
        let vars = bind_model(&mut g, &m, true, false);
        let out = foundation_loss_g(
            &mut g,
            &m,
            &vars,
            &LossInputs {
                batch: &batch,
                ks: &[0, 4, 9],
                eps: &eps,
                mask: &mask,
                lambda_rec: 1.0,
                force_eps_hat_equals_eps: false,
            },
            &sched,
        )
        .unwrap();
        let total = g.value(out.total).item();
        assert!(total.is_finite() && total > 0.0);
        g.backward(out.total);
        let grads = g.param_grads();
        let live = grads.iter().filter(|g| g.is_some()).count();
        assert_eq!(live, grads.len(), "every foundation param should receive a gradient");
    }

    #[test]
    fn forced_perfect_denoiser_leaves_recon_only() {
        let m = Model::init(tiny_cfg(), 7).unwrap();
        let sched = build_schedule(10, 1e-3, 0.05).unwrap();
        let batch = mixed_batch(16);
        let mut rng = seeds::stream(1, "model.test", 1);
        let eps = Tensor::randn(&[3, 16, 8], &mut rng);
        let mask = MaskSpec::generation(16);
        let mut g = Graph::new();
        let vars = bind_model(&mut g, &m, false, false);
        let out = foundation_loss_g(
            &mut g,
            &m,
            &vars,
            &LossInputs {
                batch: &batch,
                ks: &[1, 2, 3],
                eps: &eps,
                mask: &mask,
                lambda_rec: 0.0,
                force_eps_hat_equals_eps: true,
            },
            &sched,
        )
        .unwrap();
        assert_eq!(g.value(out.denoise).item(), 0.0);
        assert_eq!(g.value(out.total).item(), 0.0);
    }

    #[test]
    fn mask_kind_matches_loss_semantics() {
        // gradient of the denoise loss w.r.t. eps_hat is zero at observed slots
        let m = Model::init(tiny_cfg(), 7).unwrap();
        let sched = build_schedule(10, 1e-3, 0.05).unwrap();
        let batch = mixed_batch(16);
        let mut rng = seeds::stream(1, "model.test", 2);
        let eps = Tensor::randn(&[3, 16, 8], &mut rng);
        let mask = MaskSpec::short_term(16, 4).unwrap();
        let mut g = Graph::new();
        let vars = bind_model(&mut g, &m, true, false);
        let out = foundation_loss_g(
            &mut g,
            &m,
            &vars,
            &LossInputs {
                batch: &batch,
                ks: &[0, 4, 9],
                eps: &eps,
                mask: &mask,
                lambda_rec: 0.0,
                force_eps_hat_equals_eps: false,
            },
            &sched,
        )
        .unwrap();
        g.backward(out.denoise);
        let ghat = g.grad(out.eps_hat).expect("eps_hat grad");
        for bi in 0..3 {
            for t in 0..16 {
                for c in 0..8 {
                    let v = ghat.at3(bi, t, c);
                    if mask.mask[t] {
                        continue;
                    }
                    assert_eq!(v, 0.0, "observed position (b={bi}, t={t}, c={c}) has grad {v}");
                }
            }
        }
    }
}
