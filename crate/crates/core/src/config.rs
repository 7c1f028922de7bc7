//! Run configuration: a flat `[section]` / `key = value` text format with a
//! closed key schema (unknown sections or keys are rejected) and a stable
//! digest of the canonicalized text that every output file embeds.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::backbone::ModelConfig;
use crate::datagen::DataKind;
use crate::error::{Error, Result};
use crate::semantic_vae::VaeTrainConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct PathsConfig {
    pub data_dir: String,
    pub checkpoint: String,
    pub reports_dir: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub length: usize,
    pub kinds: Vec<DataKind>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSection {
    pub c0: usize,
    pub c_cond: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub ff_mult: usize,
    pub kernel_width: usize,
    pub m_top: usize,
    pub feat_dim: usize,
    pub per_position_modulation: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeSection {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lambda_rec: f64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub mask_weights: [f64; 4],
    pub checkpoint_every: usize,
    pub val_fraction: f64,
    pub random_ratio_lo: f64,
    pub random_ratio_hi: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForecastSection {
    pub n_samples: usize,
    pub task: String,
    pub horizon: usize,
    pub kind: DataKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSection {
    pub short_horizon: usize,
    pub long_horizon: usize,
    pub n_samples: usize,
    /// Cap on test samples per kind (0 = all).
    pub max_eval: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub model: ModelSection,
    pub vae: VaeSection,
    pub train: TrainSection,
    pub forecast: ForecastSection,
    pub eval: EvalSection,
    /// Digest of the canonicalized source text.
    pub hash: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            paths: PathsConfig {
                data_dir: "data".to_string(),
                checkpoint: "model.ckpt".to_string(),
                reports_dir: "reports".to_string(),
            },
            data: DataConfig { n_train: 2000, n_test: 200, length: 64, kinds: DataKind::all().to_vec() },
            schedule: ScheduleConfig { steps: 50, beta_start: 1e-4, beta_end: 0.05 },
            model: ModelSection {
                c0: 64,
                c_cond: 64,
                n_blocks: 4,
                n_heads: 4,
                ff_mult: 4,
                kernel_width: 3,
                m_top: 4,
                feat_dim: 8,
                per_position_modulation: false,
            },
            vae: VaeSection { hidden: 32, epochs: 200, lr: 1e-3, batch: 64 },
            train: TrainSection {
                epochs: 30,
                batch: 32,
                lr: 1e-3,
                lambda_rec: 1.0,
                clip_norm: 1.0,
                beta1: 0.9,
                beta2: 0.999,
                mask_weights: [0.25; 4],
                checkpoint_every: 0,
                val_fraction: 0.1,
                random_ratio_lo: 0.1,
                random_ratio_hi: 0.9,
            },
            forecast: ForecastSection { n_samples: 8, task: "short".to_string(), horizon: 8, kind: DataKind::BsTraffic },
            eval: EvalSection { short_horizon: 8, long_horizon: 48, n_samples: 4, max_eval: 0 },
            hash: config_hash(""),
        }
    }
}

impl RunConfig {
    pub fn to_model_config(&self) -> ModelConfig {
        ModelConfig {
            l: self.data.length,
            c0: self.model.c0,
            c_cond: self.model.c_cond,
            n_blocks: self.model.n_blocks,
            n_heads: self.model.n_heads,
            ff_mult: self.model.ff_mult,
            kernel_width: self.model.kernel_width,
            m_top: self.model.m_top,
            feat_dim: self.model.feat_dim,
            vae_hidden: self.vae.hidden,
            per_position_modulation: self.model.per_position_modulation,
        }
    }

    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch: self.train.batch,
            lr: self.train.lr,
            seed: self.seed,
            k: self.schedule.steps,
            beta_start: self.schedule.beta_start,
            beta_end: self.schedule.beta_end,
            mask_weights: self.train.mask_weights,
            lambda_rec: self.train.lambda_rec,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            clip_norm: self.train.clip_norm,
            checkpoint_every: self.train.checkpoint_every,
            val_fraction: self.train.val_fraction,
            random_ratio: (self.train.random_ratio_lo, self.train.random_ratio_hi),
        }
    }

    pub fn to_vae_train_config(&self) -> VaeTrainConfig {
        VaeTrainConfig {
            c0: self.model.c0,
            hidden: self.vae.hidden,
            epochs: self.vae.epochs,
            lr: self.vae.lr,
            batch: self.vae.batch,
            seed: self.seed,
        }
    }

    /// Cross-section consistency checks beyond per-key parsing.
    pub fn validate(&self) -> Result<()> {
        self.to_model_config().validate()?;
        self.to_train_config().validate()?;
        if self.data.n_train == 0 || self.data.n_test == 0 {
            return Err(Error::invalid("n_train and n_test must be positive".to_string()));
        }
        if self.data.kinds.is_empty() {
            return Err(Error::invalid("at least one data kind required".to_string()));
        }
        if !(self.schedule.beta_start > 0.0
            && self.schedule.beta_start <= self.schedule.beta_end
            && self.schedule.beta_end < 1.0)
        {
            return Err(Error::invalid("schedule betas out of range".to_string()));
        }
        let l = self.data.length;
        if self.eval.short_horizon < 1 || self.eval.short_horizon > l / 4 {
            return Err(Error::invalid(format!("eval short horizon outside 1..={}", l / 4)));
        }
        let lo = (3 * l).div_ceil(4);
        if self.eval.long_horizon < lo || self.eval.long_horizon > l - 1 {
            return Err(Error::invalid(format!("eval long horizon outside {lo}..={}", l - 1)));
        }
        if self.forecast.n_samples == 0 || self.eval.n_samples == 0 {
            return Err(Error::invalid("n_samples must be positive".to_string()));
        }
        crate::masking::MaskKind::from_name(&self.forecast.task)?;
        Ok(())
    }
}

/// Stable digest: sorted `section.key=value` lines of the source text,
/// SHA-256, first 16 hex chars.
pub fn config_hash(text: &str) -> String {
    let mut lines: Vec<String> = Vec::new();
    let mut section = String::new();
    for raw in text.lines() {
        let line = strip_comment(raw).trim().to_string();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('[') && line.ends_with(']') {
            section = line[1..line.len() - 1].trim().to_string();
            continue;
        }
        if let Some((k, v)) = line.split_once('=') {
            lines.push(format!("{section}.{}={}", k.trim(), v.trim()));
        }
    }
    lines.sort();
    let mut h = Sha256::new();
    h.update(lines.join("\n").as_bytes());
    let digest = h.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(i) => &line[..i],
        None => line,
    }
}

/// Parse and validate a config text against the documented schema; never
/// panics on malformed input.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut section: Option<String> = None;
    let mut seen: Vec<String> = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = strip_comment(raw).trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('[') {
            if !line.ends_with(']') || line.len() < 3 {
                return Err(Error::parse(format!("line {}: malformed section header", ln + 1)));
            }
            let name = line[1..line.len() - 1].trim().to_string();
            if !KNOWN_SECTIONS.contains(&name.as_str()) {
                return Err(Error::parse(format!("line {}: unknown section [{name}]", ln + 1)));
            }
            section = Some(name);
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::parse(format!("line {}: expected key = value", ln + 1)));
        };
        let Some(sec) = &section else {
            return Err(Error::parse(format!("line {}: key outside any section", ln + 1)));
        };
        let key = k.trim();
        let val = v.trim();
        let full = format!("{sec}.{key}");
        if seen.contains(&full) {
            return Err(Error::parse(format!("line {}: duplicate key {full}", ln + 1)));
        }
        seen.push(full.clone());
        apply_key(&mut cfg, sec, key, val)
            .map_err(|e| Error::parse(format!("line {}: {e}", ln + 1)))?;
    }
    cfg.hash = config_hash(text);
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

const KNOWN_SECTIONS: &[&str] = &["run", "paths", "data", "schedule", "model", "vae", "train", "forecast", "eval"];

fn p_usize(v: &str) -> Result<usize> {
    v.parse::<usize>().map_err(|_| Error::parse(format!("expected unsigned integer, got '{v}'")))
}

fn p_u64(v: &str) -> Result<u64> {
    v.parse::<u64>().map_err(|_| Error::parse(format!("expected unsigned integer, got '{v}'")))
}

fn p_f64(v: &str) -> Result<f64> {
    let x = v.parse::<f64>().map_err(|_| Error::parse(format!("expected number, got '{v}'")))?;
    if !x.is_finite() {
        return Err(Error::parse(format!("expected finite number, got '{v}'")));
    }
    Ok(x)
}

fn p_bool(v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::parse(format!("expected true|false, got '{v}'"))),
    }
}

fn p_kinds(v: &str) -> Result<Vec<DataKind>> {
    let mut out = Vec::new();
    for part in v.split(',') {
        let k = DataKind::from_name(part.trim()).map_err(|e| Error::parse(e.to_string()))?;
        if out.contains(&k) {
            return Err(Error::parse(format!("duplicate kind '{}'", k.name())));
        }
        out.push(k);
    }
    Ok(out)
}

fn p_weights(v: &str) -> Result<[f64; 4]> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(Error::parse("mask_weights needs 4 comma-separated values".to_string()));
    }
    let mut out = [0.0; 4];
    for (i, p) in parts.iter().enumerate() {
        out[i] = p_f64(p)?;
    }
    Ok(out)
}

fn apply_key(cfg: &mut RunConfig, section: &str, key: &str, val: &str) -> Result<()> {
    match (section, key) {
        ("run", "seed") => cfg.seed = p_u64(val)?,
        ("paths", "data_dir") => cfg.paths.data_dir = val.to_string(),
        ("paths", "checkpoint") => cfg.paths.checkpoint = val.to_string(),
        ("paths", "reports_dir") => cfg.paths.reports_dir = val.to_string(),
        ("data", "n_train") => cfg.data.n_train = p_usize(val)?,
        ("data", "n_test") => cfg.data.n_test = p_usize(val)?,
        ("data", "length") => cfg.data.length = p_usize(val)?,
        ("data", "kinds") => cfg.data.kinds = p_kinds(val)?,
        ("schedule", "steps") => cfg.schedule.steps = p_usize(val)?,
        ("schedule", "beta_start") => cfg.schedule.beta_start = p_f64(val)?,
        ("schedule", "beta_end") => cfg.schedule.beta_end = p_f64(val)?,
        ("model", "c0") => cfg.model.c0 = p_usize(val)?,
        ("model", "c_cond") => cfg.model.c_cond = p_usize(val)?,
        ("model", "n_blocks") => cfg.model.n_blocks = p_usize(val)?,
        ("model", "n_heads") => cfg.model.n_heads = p_usize(val)?,
        ("model", "ff_mult") => cfg.model.ff_mult = p_usize(val)?,
        ("model", "kernel_width") => cfg.model.kernel_width = p_usize(val)?,
        ("model", "m_top") => cfg.model.m_top = p_usize(val)?,
        ("model", "feat_dim") => cfg.model.feat_dim = p_usize(val)?,
        ("model", "per_position_modulation") => cfg.model.per_position_modulation = p_bool(val)?,
        ("vae", "hidden") => cfg.vae.hidden = p_usize(val)?,
        ("vae", "epochs") => cfg.vae.epochs = p_usize(val)?,
        ("vae", "lr") => cfg.vae.lr = p_f64(val)?,
        ("vae", "batch") => cfg.vae.batch = p_usize(val)?,
        ("train", "epochs") => cfg.train.epochs = p_usize(val)?,
        ("train", "batch") => cfg.train.batch = p_usize(val)?,
        ("train", "lr") => cfg.train.lr = p_f64(val)?,
        ("train", "lambda_rec") => cfg.train.lambda_rec = p_f64(val)?,
        ("train", "clip_norm") => cfg.train.clip_norm = p_f64(val)?,
        ("train", "beta1") => cfg.train.beta1 = p_f64(val)?,
        ("train", "beta2") => cfg.train.beta2 = p_f64(val)?,
        ("train", "mask_weights") => cfg.train.mask_weights = p_weights(val)?,
        ("train", "checkpoint_every") => cfg.train.checkpoint_every = p_usize(val)?,
        ("train", "val_fraction") => cfg.train.val_fraction = p_f64(val)?,
        ("train", "random_ratio_lo") => cfg.train.random_ratio_lo = p_f64(val)?,
        ("train", "random_ratio_hi") => cfg.train.random_ratio_hi = p_f64(val)?,
        ("forecast", "n_samples") => cfg.forecast.n_samples = p_usize(val)?,
        ("forecast", "task") => cfg.forecast.task = val.to_string(),
        ("forecast", "horizon") => cfg.forecast.horizon = p_usize(val)?,
        ("forecast", "kind") => cfg.forecast.kind = DataKind::from_name(val).map_err(|e| Error::parse(e.to_string()))?,
        ("eval", "short_horizon") => cfg.eval.short_horizon = p_usize(val)?,
        ("eval", "long_horizon") => cfg.eval.long_horizon = p_usize(val)?,
        ("eval", "n_samples") => cfg.eval.n_samples = p_usize(val)?,
        ("eval", "max_eval") => cfg.eval.max_eval = p_usize(val)?,
        _ => return Err(Error::parse(format!("unknown key '{key}' in section [{section}]"))),
    }
    Ok(())
}
