//! Denoising-phase training: mask sampling, perturbation, masked loss,
//! clipped adaptive-moment updates, checkpointing, and CSV logs.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::{self, CheckpointHeader};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::masking::{make_mask, sample_mask_kind, MaskKind, MaskSpec};
use crate::model::{bind_model, foundation_loss_g, Batch, LossInputs, Model};
use crate::optim::{Adam, AdamConfig};
use crate::schedule::{build_schedule, NoiseSchedule};
use crate::seeds;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub k: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Sampling weights for (short, long, generation, random) masks.
    pub mask_weights: [f64; 4],
    pub lambda_rec: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub clip_norm: f64,
    /// Also write a checkpoint every this many epochs (0 = end only).
    pub checkpoint_every: usize,
    /// Per-kind tail fraction held out for the validation loss.
    pub val_fraction: f64,
    /// Range the random-mask ratio is drawn from during training.
    pub random_ratio: (f64, f64),
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch: 32,
            lr: 1e-3,
            seed: 0,
            k: 50,
            beta_start: 1e-4,
            beta_end: 0.05,
            mask_weights: [0.25; 4],
            lambda_rec: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            clip_norm: 1.0,
            checkpoint_every: 0,
            val_fraction: 0.1,
            random_ratio: (0.1, 0.9),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.lr <= 0.0 || self.k < 2 {
            return Err(Error::invalid("batch, lr, and k must be positive".to_string()));
        }
        let s: f64 = self.mask_weights.iter().sum();
        if (s - 1.0).abs() > 1e-9 || self.mask_weights.iter().any(|&w| w < 0.0) {
            return Err(Error::invalid("mask weights must be nonnegative and sum to 1".to_string()));
        }
        if !(0.0..=0.5).contains(&self.val_fraction) {
            return Err(Error::invalid("val fraction must lie in [0, 0.5]".to_string()));
        }
        if self.lambda_rec < 0.0 || self.clip_norm <= 0.0 {
            return Err(Error::invalid("lambda_rec must be >= 0 and clip_norm > 0".to_string()));
        }
        Ok(())
    }
}

/// Test hooks for exercising the loss plumbing.
#[derive(Clone, Copy, Debug, Default)]
pub struct StepHooks {
    pub force_eps_hat_equals_eps: bool,
    pub force_mask_kind: Option<MaskKind>,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub sched: NoiseSchedule,
    adam: Adam,
    steps_done: u64,
}

impl Trainer {
    pub fn new(model: &Model, cfg: TrainConfig) -> Result<Trainer> {
        cfg.validate()?;
        let sched = build_schedule(cfg.k, cfg.beta_start, cfg.beta_end)?;
        let adam = Adam::new(
            AdamConfig {
                lr: cfg.lr,
                beta1: cfg.beta1,
                beta2: cfg.beta2,
                eps: 1e-8,
                clip_norm: Some(cfg.clip_norm),
            },
            &[&model.backbone.store, &model.prompt.store],
        );
        Ok(Trainer { cfg, sched, adam, steps_done: 0 })
    }

    /// Draw the step's mask, diffusion steps, and noise from `rng` in a
    /// fixed order.
    fn draw_step(
        &self,
        model: &Model,
        b: usize,
        rng: &mut ChaCha8Rng,
        hooks: &StepHooks,
    ) -> Result<(MaskSpec, Vec<usize>, Tensor)> {
        let l = model.cfg.l;
        let kind = hooks
            .force_mask_kind
            .unwrap_or_else(|| sample_mask_kind(&self.cfg.mask_weights, rng));
        let mask = match kind {
            MaskKind::ShortTerm => {
                let h = rng.random_range(1..=(l / 4).max(1));
                make_mask(kind, l, h as f64, rng)?
            }
            MaskKind::LongTerm => {
                let lo = (3 * l).div_ceil(4);
                let h = rng.random_range(lo..=l - 1);
                make_mask(kind, l, h as f64, rng)?
            }
            MaskKind::Generation => make_mask(kind, l, 0.0, rng)?,
            MaskKind::Random => {
                let r = rng.random_range(self.cfg.random_ratio.0..self.cfg.random_ratio.1);
                make_mask(kind, l, r, rng)?
            }
        };
        let ks: Vec<usize> = (0..b).map(|_| rng.random_range(0..self.cfg.k)).collect();
        let eps = Tensor::randn(&[b, l, model.cfg.c0], rng);
        Ok((mask, ks, eps))
    }

    /// One optimization step; the VAEs are bound frozen and never updated.
    pub fn train_step(&mut self, model: &mut Model, batch: &Batch, rng: &mut ChaCha8Rng) -> Result<f64> {
        self.train_step_with_hooks(model, batch, rng, &StepHooks::default())
    }

    pub fn train_step_with_hooks(
        &mut self,
        model: &mut Model,
        batch: &Batch,
        rng: &mut ChaCha8Rng,
        hooks: &StepHooks,
    ) -> Result<f64> {
        let (mask, ks, eps) = self.draw_step(model, batch.len(), rng, hooks)?;
        let mut g = Graph::new();
        let vars = bind_model(&mut g, model, true, false);
        let out = foundation_loss_g(
            &mut g,
            model,
            &vars,
            &LossInputs {
                batch,
                ks: &ks,
                eps: &eps,
                mask: &mask,
                lambda_rec: self.cfg.lambda_rec,
                force_eps_hat_equals_eps: hooks.force_eps_hat_equals_eps,
            },
            &self.sched,
        )?;
        let loss = g.value(out.total).item();
        if !loss.is_finite() {
            return Err(Error::numeric(format!("loss diverged at step {}", self.steps_done)));
        }
        g.backward(out.total);
        let grads = g.param_grads();
        let Model { backbone, prompt, .. } = model;
        self.adam.step(&mut [&mut backbone.store, &mut prompt.store], &grads);
        self.steps_done += 1;
        Ok(loss)
    }

    /// Forward-only loss with the same sampling pipeline; parameters are
    /// bound as constants and no gradient pass runs.
    pub fn eval_loss(&self, model: &Model, batch: &Batch, rng: &mut ChaCha8Rng) -> Result<f64> {
        let (mask, ks, eps) = self.draw_step(model, batch.len(), rng, &StepHooks::default())?;
        let mut g = Graph::new();
        let vars = bind_model(&mut g, model, false, false);
        let out = foundation_loss_g(
            &mut g,
            model,
            &vars,
            &LossInputs {
                batch,
                ks: &ks,
                eps: &eps,
                mask: &mask,
                lambda_rec: self.cfg.lambda_rec,
                force_eps_hat_equals_eps: false,
            },
            &self.sched,
        )?;
        Ok(g.value(out.total).item())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub wall_time_s: f64,
}

pub struct TrainRun<'a> {
    pub checkpoint_path: &'a Path,
    pub log_path: Option<&'a Path>,
    pub config_hash: String,
}

/// Stratified index batches: cycle the present kinds, popping one shuffled
/// index at a time.
fn stratified_batches(per_kind: &mut [Vec<usize>], batch: usize) -> Vec<Vec<usize>> {
    let mut cursors = vec![0usize; per_kind.len()];
    let mut batches = Vec::new();
    let total: usize = per_kind.iter().map(|v| v.len()).sum();
    let mut emitted = 0;
    let mut current = Vec::with_capacity(batch);
    while emitted < total {
        let mut progressed = false;
        for (ki, list) in per_kind.iter().enumerate() {
            if cursors[ki] < list.len() {
                current.push(list[cursors[ki]]);
                cursors[ki] += 1;
                emitted += 1;
                progressed = true;
                if current.len() == batch {
                    batches.push(std::mem::take(&mut current));
                }
            }
        }
        debug_assert!(progressed);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

/// Run the denoising phase over `dataset`, logging per-epoch train and
/// validation losses and writing checkpoints.
pub fn train_loop(dataset: &Dataset, model: &mut Model, cfg: &TrainConfig, run: &TrainRun) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if dataset.samples.is_empty() {
        return Err(Error::invalid("empty dataset".to_string()));
    }
    let l = dataset.header.l;
    if l != model.cfg.l {
        return Err(Error::shape(format!("dataset L={l} vs model L={}", model.cfg.l)));
    }

    // per-kind index pools; the tail fraction of each is validation
    let mut train_pool: Vec<Vec<usize>> = Vec::new();
    let mut val_pool: Vec<usize> = Vec::new();
    for kind in crate::datagen::DataKind::all() {
        let idx: Vec<usize> = dataset
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.kind == kind)
            .map(|(i, _)| i)
            .collect();
        if idx.is_empty() {
            continue;
        }
        let n_val = ((idx.len() as f64) * cfg.val_fraction).floor() as usize;
        let split = idx.len() - n_val;
        val_pool.extend_from_slice(&idx[split..]);
        train_pool.push(idx[..split].to_vec());
    }
    if train_pool.iter().all(|v| v.is_empty()) {
        return Err(Error::invalid("no training samples after validation split".to_string()));
    }

    let mut trainer = Trainer::new(model, cfg.clone())?;
    let header = CheckpointHeader::new(model, cfg.k, cfg.beta_start, cfg.beta_end, run.config_hash.clone());
    let mut logs = Vec::new();
    let started = Instant::now();

    if cfg.epochs == 0 {
        checkpoint::save(run.checkpoint_path, model, &header)?;
        write_log(run.log_path, &logs)?;
        return Ok(logs);
    }

    let mut global_step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut shuffle_rng = seeds::stream(cfg.seed, "train.shuffle", epoch as u64);
        let mut pools = train_pool.clone();
        for p in &mut pools {
            p.shuffle(&mut shuffle_rng);
        }
        let batches = stratified_batches(&mut pools, cfg.batch);
        let mut epoch_loss = 0.0;
        for idxs in &batches {
            let refs: Vec<&crate::datagen::SeriesSample> = idxs.iter().map(|&i| &dataset.samples[i]).collect();
            let batch = Batch::from_samples(&refs, l)?;
            let mut rng = seeds::stream(cfg.seed, "train.step", global_step);
            let loss = trainer
                .train_step(model, &batch, &mut rng)
                .map_err(|e| Error::numeric(format!("epoch {epoch}: {e}")))?;
            epoch_loss += loss;
            global_step += 1;
        }
        let train_loss = epoch_loss / batches.len().max(1) as f64;

        // validation with a stream that repeats identically every epoch
        let val_loss = if val_pool.is_empty() {
            f64::NAN
        } else {
            let mut rng = seeds::stream(cfg.seed, "train.val", 0);
            let mut acc = 0.0;
            let mut n = 0usize;
            for chunk in val_pool.chunks(cfg.batch) {
                let refs: Vec<&crate::datagen::SeriesSample> =
                    chunk.iter().map(|&i| &dataset.samples[i]).collect();
                let batch = Batch::from_samples(&refs, l)?;
                acc += trainer.eval_loss(model, &batch, &mut rng)?;
                n += 1;
            }
            acc / n as f64
        };

        let wall = started.elapsed().as_secs_f64();
        log::info!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6} ({wall:.1}s)");
        logs.push(EpochLog { epoch, split: "train".to_string(), loss: train_loss, wall_time_s: wall });
        logs.push(EpochLog { epoch, split: "val".to_string(), loss: val_loss, wall_time_s: wall });

        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
            checkpoint::save(run.checkpoint_path, model, &header)?;
        }
    }

    checkpoint::save(run.checkpoint_path, model, &header)?;
    write_log(run.log_path, &logs)?;
    Ok(logs)
}

fn write_log(path: Option<&Path>, logs: &[EpochLog]) -> Result<()> {
    let Some(path) = path else { return Ok(()) };
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for row in logs {
        w.serialize(row).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;
    use crate::datagen::{gen_app_traffic, gen_bs_traffic, gen_rsrp, SeriesSample};

    const L: usize = 16;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig { l: L, c0: 8, c_cond: 8, n_blocks: 1, n_heads: 2, ff_mult: 2, feat_dim: 4, vae_hidden: 8, ..Default::default() }
    }

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig { epochs: 1, batch: 6, k: 10, val_fraction: 0.2, seed: 3, ..Default::default() }
    }

    fn tiny_dataset(n: usize) -> Dataset {
        Dataset::from_parts(
            L,
            vec![
                gen_bs_traffic(1, n, L).unwrap(),
                gen_app_traffic(1, n, L).unwrap(),
                gen_rsrp(1, n, L).unwrap(),
            ],
        )
        .unwrap()
    }

    fn first_batch(ds: &Dataset, n: usize) -> Batch {
        let refs: Vec<&SeriesSample> = ds.samples.iter().take(n).collect();
        Batch::from_samples(&refs, L).unwrap()
    }

    #[test]
    fn same_seed_gives_identical_loss_sequences() {
        let ds = tiny_dataset(6);
        let batch = first_batch(&ds, 6);
        let run = |seed: u64| -> Vec<f64> {
            let mut model = Model::init(tiny_cfg(), 5).unwrap();
            let mut tr = Trainer::new(&model, TrainConfig { seed, k: 10, ..Default::default() }).unwrap();
            (0..5)
                .map(|s| {
                    let mut rng = seeds::stream(seed, "test.step", s);
                    tr.train_step(&mut model, &batch, &mut rng).unwrap()
                })
                .collect()
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }

    #[test]
    fn forced_perfect_denoiser_gives_zero_loss() {
        let ds = tiny_dataset(4);
        let batch = first_batch(&ds, 4);
        let mut model = Model::init(tiny_cfg(), 5).unwrap();
        let mut tr = Trainer::new(
            &model,
            TrainConfig { lambda_rec: 0.0, k: 10, ..Default::default() },
        )
        .unwrap();
        let mut rng = seeds::stream(0, "test.force", 0);
        let hooks = StepHooks { force_eps_hat_equals_eps: true, force_mask_kind: Some(MaskKind::Generation) };
        let loss = tr.train_step_with_hooks(&mut model, &batch, &mut rng, &hooks).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn vae_params_stay_frozen_and_val_leaves_params_untouched() {
        let ds = tiny_dataset(6);
        let batch = first_batch(&ds, 6);
        let mut model = Model::init(tiny_cfg(), 5).unwrap();
        let vae_before = model.vaes.byte_image();
        let mut tr = Trainer::new(&model, TrainConfig { k: 10, ..Default::default() }).unwrap();
        for s in 0..3 {
            let mut rng = seeds::stream(1, "test.frozen", s);
            tr.train_step(&mut model, &batch, &mut rng).unwrap();
        }
        assert_eq!(model.vaes.byte_image(), vae_before, "vae changed during denoiser training");

        let foundation_before =
            (model.backbone.store.byte_image(), model.prompt.store.byte_image());
        let mut rng = seeds::stream(1, "test.val", 0);
        tr.eval_loss(&model, &batch, &mut rng).unwrap();
        let foundation_after = (model.backbone.store.byte_image(), model.prompt.store.byte_image());
        assert_eq!(foundation_before, foundation_after, "validation touched parameters");
    }

    #[test]
    fn zero_epoch_loop_writes_initialization() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("m.ckpt");
        let ds = tiny_dataset(5);
        let mut model = Model::init(tiny_cfg(), 5).unwrap();
        let before = model.clone();
        let cfg = TrainConfig { epochs: 0, ..tiny_train_cfg() };
        let logs = train_loop(&ds, &mut model, &cfg, &TrainRun {
            checkpoint_path: &ckpt,
            log_path: None,
            config_hash: "h".to_string(),
        })
        .unwrap();
        assert!(logs.is_empty());
        assert_eq!(model, before);
        let (_, loaded) = checkpoint::load(&ckpt).unwrap();
        assert_eq!(loaded, before);
    }

    #[test]
    fn loop_logs_and_checkpoint_roundtrip_forward_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("m.ckpt");
        let log = dir.path().join("log.csv");
        let ds = tiny_dataset(8);
        let mut model = Model::init(tiny_cfg(), 5).unwrap();
        let cfg = tiny_train_cfg();
        let logs = train_loop(&ds, &mut model, &cfg, &TrainRun {
            checkpoint_path: &ckpt,
            log_path: Some(&log),
            config_hash: "h".to_string(),
        })
        .unwrap();
        assert_eq!(logs.len(), 2);
        assert!(logs.iter().all(|e| e.loss.is_finite()));
        assert!(log.exists());

        let (_, loaded) = checkpoint::load(&ckpt).unwrap();
        assert_eq!(loaded, model);
        let batch = first_batch(&ds, 4);
        let probe = Tensor::randn(&[4, L, 8], &mut seeds::stream(2, "probe", 0));
        let a = crate::model::predict_eps_for_state(&model, &probe, 3, &batch).unwrap();
        let b = crate::model::predict_eps_for_state(&loaded, &probe, 3, &batch).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_kind_corpus_trains() {
        let ds = Dataset::from_parts(L, vec![gen_bs_traffic(2, 8, L).unwrap()]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("m.ckpt");
        let mut model = Model::init(tiny_cfg(), 5).unwrap();
        let logs = train_loop(&ds, &mut model, &tiny_train_cfg(), &TrainRun {
            checkpoint_path: &ckpt,
            log_path: None,
            config_hash: "h".to_string(),
        })
        .unwrap();
        assert!(!logs.is_empty());
    }

    #[test]
    fn smoke_loss_trends_down() {
        let samples = gen_bs_traffic(7, 32, L).unwrap();
        let refs: Vec<&SeriesSample> = samples.iter().collect();
        let batch = Batch::from_samples(&refs, L).unwrap();
        let mut model = Model::init(tiny_cfg(), 5).unwrap();
        let mut tr = Trainer::new(&model, TrainConfig { k: 10, lr: 3e-3, ..Default::default() }).unwrap();
        let losses: Vec<f64> = (0..50)
            .map(|s| {
                let mut rng = seeds::stream(4, "smoke", s);
                tr.train_step(&mut model, &batch, &mut rng).unwrap()
            })
            .collect();
        // least-squares slope over step index
        let n = losses.len() as f64;
        let mx = (n - 1.0) / 2.0;
        let my = losses.iter().sum::<f64>() / n;
        let num: f64 = losses.iter().enumerate().map(|(i, &y)| (i as f64 - mx) * (y - my)).sum();
        let den: f64 = (0..losses.len()).map(|i| (i as f64 - mx).powi(2)).sum();
        let slope = num / den;
        assert!(slope < 0.0, "loss did not trend down: slope {slope}, losses {losses:?}");
    }

    #[test]
    fn config_validation_rejects_bad_weights() {
        let mut cfg = TrainConfig::default();
        cfg.mask_weights = [0.5, 0.5, 0.5, 0.5];
        assert!(cfg.validate().is_err());
    }
}
