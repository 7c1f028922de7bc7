//! Config-driven pipeline stages behind the CLI subcommands. Each stage is a
//! pure function of its config (plus the files earlier stages wrote), so a
//! rerun reproduces every output byte for byte.

use std::path::{Path, PathBuf};

use rand::Rng;

use crate::checkpoint::{self, CheckpointHeader};
use crate::config::RunConfig;
use crate::datagen::{gen_app_traffic, gen_bs_traffic, gen_rsrp, DataKind};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::masking::{MaskKind, MaskSpec};
use crate::model::Model;
use crate::report::{
    self, eval_grid, parse_forecast_csv, write_eval_csv, write_forecast_csv, ForecastDoc,
    ForecastRow,
};
use crate::sampler::{forecast, ForecastRequest};
use crate::schedule::build_schedule;
use crate::semantic_vae::pretrain_single_vae;
use crate::seeds;
use crate::training::{train_loop, TrainRun};

pub fn train_data_path(cfg: &RunConfig) -> PathBuf {
    Path::new(&cfg.paths.data_dir).join("train.jsonl")
}

pub fn test_data_path(cfg: &RunConfig) -> PathBuf {
    Path::new(&cfg.paths.data_dir).join("test.jsonl")
}

pub fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    PathBuf::from(&cfg.paths.checkpoint)
}

pub fn eval_report_path(cfg: &RunConfig) -> PathBuf {
    Path::new(&cfg.paths.reports_dir).join("eval.csv")
}

pub fn forecast_report_path(cfg: &RunConfig) -> PathBuf {
    Path::new(&cfg.paths.reports_dir).join("forecast.csv")
}

pub fn train_log_path(cfg: &RunConfig) -> PathBuf {
    Path::new(&cfg.paths.reports_dir).join("train_log.csv")
}

fn gen_kind(kind: DataKind, seed: u64, n: usize, l: usize) -> Result<Vec<crate::datagen::SeriesSample>> {
    match kind {
        DataKind::BsTraffic => gen_bs_traffic(seed, n, l),
        DataKind::AppTraffic => gen_app_traffic(seed, n, l),
        DataKind::Rsrp => gen_rsrp(seed, n, l),
    }
}

/// Generate the train and test splits with disjoint seed streams.
pub fn stage_datagen(cfg: &RunConfig) -> Result<(PathBuf, PathBuf)> {
    let l = cfg.data.length;
    let train_seed: u64 = seeds::stream(cfg.seed, "datagen.split", 0).random();
    let test_seed: u64 = seeds::stream(cfg.seed, "datagen.split", 1).random();
    let mut train_parts = Vec::new();
    let mut test_parts = Vec::new();
    for &kind in &cfg.data.kinds {
        train_parts.push(gen_kind(kind, train_seed, cfg.data.n_train, l)?);
        test_parts.push(gen_kind(kind, test_seed, cfg.data.n_test, l)?);
    }
    let train = Dataset::from_parts(l, train_parts)?;
    let test = Dataset::from_parts(l, test_parts)?;
    let train_path = train_data_path(cfg);
    let test_path = test_data_path(cfg);
    train.write_file(&train_path)?;
    test.write_file(&test_path)?;
    Ok((train_path, test_path))
}

fn pretrain_vaes_into(model: &mut Model, train: &Dataset, cfg: &RunConfig) -> Result<()> {
    let vcfg = cfg.to_vae_train_config();
    for kind in DataKind::all() {
        let samples = train.of_kind(kind);
        if samples.is_empty() {
            continue;
        }
        let (params, _) = pretrain_single_vae(kind, &samples, train.header.l, &vcfg)?;
        *model.vaes.get_mut(kind) = params;
    }
    Ok(())
}

fn header_for(cfg: &RunConfig, model: &Model) -> CheckpointHeader {
    CheckpointHeader::new(model, cfg.schedule.steps, cfg.schedule.beta_start, cfg.schedule.beta_end, cfg.hash.clone())
}

/// Phase 1: pre-train the VAEs on the train split and write a checkpoint
/// holding them next to the freshly initialized foundation weights.
pub fn stage_pretrain_vae(cfg: &RunConfig) -> Result<PathBuf> {
    let train = Dataset::read_file(&train_data_path(cfg))?;
    let mut model = Model::init(cfg.to_model_config(), cfg.seed)?;
    pretrain_vaes_into(&mut model, &train, cfg)?;
    let path = checkpoint_path(cfg);
    checkpoint::save(&path, &model, &header_for(cfg, &model))?;
    Ok(path)
}

/// Phase 2: train the denoiser. VAEs are taken from an existing checkpoint
/// when one matches this config; otherwise phase 1 runs first. The
/// foundation weights always start from the seeded initialization.
pub fn stage_train(cfg: &RunConfig) -> Result<PathBuf> {
    let train = Dataset::read_file(&train_data_path(cfg))?;
    let mut model = Model::init(cfg.to_model_config(), cfg.seed)?;
    let ckpt_path = checkpoint_path(cfg);
    let mut have_vaes = false;
    if ckpt_path.exists() {
        let (header, loaded) = checkpoint::load(&ckpt_path)?;
        if header.model != model.cfg {
            return Err(Error::invalid(
                "existing checkpoint was built with a different model config".to_string(),
            ));
        }
        model.vaes = loaded.vaes;
        have_vaes = true;
    }
    if !have_vaes {
        pretrain_vaes_into(&mut model, &train, cfg)?;
    }
    let log_path = train_log_path(cfg);
    let run = TrainRun { checkpoint_path: &ckpt_path, log_path: Some(&log_path), config_hash: cfg.hash.clone() };
    train_loop(&train, &mut model, &cfg.to_train_config(), &run)?;
    Ok(ckpt_path)
}

/// Evaluate the kind x task x metric grid over the test split.
pub fn stage_eval(cfg: &RunConfig) -> Result<PathBuf> {
    let (header, model) = checkpoint::load(&checkpoint_path(cfg))?;
    let sched = build_schedule(header.schedule_k, header.beta_start, header.beta_end)?;
    let test = Dataset::read_file(&test_data_path(cfg))?;
    let rows = eval_grid(&model, &sched, &test, &cfg.eval, cfg.seed, &cfg.hash)?;
    let path = eval_report_path(cfg);
    write_eval_csv(&path, &rows, &cfg.hash)?;
    Ok(path)
}

#[derive(Clone, Debug, Default)]
pub struct ForecastArgs {
    pub task: Option<String>,
    pub horizon: Option<usize>,
    pub kind: Option<DataKind>,
    /// Ordinal index within the chosen kind's test samples.
    pub sample_id: u64,
}

/// Forecast one test sample and write the per-position CSV.
pub fn stage_forecast(cfg: &RunConfig, args: &ForecastArgs) -> Result<PathBuf> {
    let (header, model) = checkpoint::load(&checkpoint_path(cfg))?;
    let sched = build_schedule(header.schedule_k, header.beta_start, header.beta_end)?;
    let test = Dataset::read_file(&test_data_path(cfg))?;
    let l = test.header.l;

    let kind = args.kind.unwrap_or(cfg.forecast.kind);
    let task = MaskKind::from_name(args.task.as_deref().unwrap_or(&cfg.forecast.task))?;
    let horizon = args.horizon.unwrap_or(cfg.forecast.horizon);
    let mask = match task {
        MaskKind::ShortTerm => MaskSpec::short_term(l, horizon)?,
        MaskKind::LongTerm => MaskSpec::long_term(l, horizon)?,
        MaskKind::Generation => MaskSpec::generation(l),
        MaskKind::Random => {
            return Err(Error::invalid("forecast task must be short|long|generation".to_string()))
        }
    };

    let of_kind = test.of_kind(kind);
    let sample = of_kind
        .get(args.sample_id as usize)
        .ok_or_else(|| Error::invalid(format!(
            "sample {} out of range: test split has {} samples of kind {}",
            args.sample_id,
            of_kind.len(),
            kind.name()
        )))?;

    let req = ForecastRequest {
        kind,
        observed: sample.values.clone(),
        mask: mask.clone(),
        env: sample.env.clone(),
        n_samples: cfg.forecast.n_samples,
        seed: seeds::stream(cfg.seed, "forecast.cli", args.sample_id).random(),
    };
    let result = forecast(&req, &model, &sched)?;

    let rows: Vec<ForecastRow> = (0..l)
        .map(|t| ForecastRow {
            sample_id: sample.sample_id,
            position: t,
            observed: !mask.mask[t],
            truth: Some(sample.values[t]),
            point: result.point[t],
            draws: result.draws.iter().map(|d| d[t]).collect(),
        })
        .collect();
    let doc = ForecastDoc { config_hash: cfg.hash.clone(), n_draws: cfg.forecast.n_samples, rows };
    let path = forecast_report_path(cfg);
    write_forecast_csv(&path, &doc)?;
    Ok(path)
}

/// Reshape a forecast CSV into the tidy long format.
pub fn stage_plotdata(input: &Path, output: &Path) -> Result<()> {
    let text = std::fs::read_to_string(input)?;
    let doc = parse_forecast_csv(&text)?;
    if let Some(dir) = output.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(output, report::plotdata_to_string(&doc))?;
    Ok(())
}
