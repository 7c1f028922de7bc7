//! Report files: forecast CSVs, the kind x task x metric evaluation grid,
//! and the tidy long-format reshape for plotting.
//!
//! Every file starts with a `# format=... config=...` line carrying the
//! format tag and the config hash.

use std::path::Path;

use crate::config::EvalSection;
use crate::datagen::DataKind;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::masking::{MaskKind, MaskSpec};
use crate::metrics;
use crate::model::Model;
use crate::sampler::{forecast_many, ForecastUnit};
use crate::schedule::NoiseSchedule;

pub const FORECAST_FORMAT: &str = "mobiforge.forecast.v1";
pub const EVAL_FORMAT: &str = "mobiforge.eval.v1";
pub const SERIES_FORMAT: &str = "mobiforge.series.v1";

const MAX_CSV_DRAWS: usize = 4096;
const MAX_CSV_ROWS: usize = 10_000_000;

#[derive(Clone, Debug, PartialEq)]
pub struct ForecastRow {
    pub sample_id: u64,
    pub position: usize,
    pub observed: bool,
    pub truth: Option<f64>,
    pub point: f64,
    pub draws: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForecastDoc {
    pub config_hash: String,
    pub n_draws: usize,
    pub rows: Vec<ForecastRow>,
}

fn fmt_f64(v: f64) -> String {
    let mut buf = ryu_shortest(v);
    if buf == "-0" {
        buf = "0".to_string();
    }
    buf
}

fn ryu_shortest(v: f64) -> String {
    // serde_json prints shortest round-trip floats; reuse that
    serde_json::to_string(&v).unwrap_or_else(|_| v.to_string())
}

pub fn forecast_doc_to_string(doc: &ForecastDoc) -> String {
    let mut out = format!("# format={FORECAST_FORMAT} config={}\n", doc.config_hash);
    out.push_str("sample_id,position,observed_flag,truth,point");
    for d in 0..doc.n_draws {
        out.push_str(&format!(",draw_{d}"));
    }
    out.push('\n');
    for r in &doc.rows {
        let truth = r.truth.map(fmt_f64).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{}",
            r.sample_id,
            r.position,
            u8::from(r.observed),
            truth,
            fmt_f64(r.point)
        ));
        for d in &r.draws {
            out.push(',');
            out.push_str(&fmt_f64(*d));
        }
        out.push('\n');
    }
    out
}

pub fn write_forecast_csv(path: &Path, doc: &ForecastDoc) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, forecast_doc_to_string(doc))?;
    Ok(())
}

/// Strict parser for forecast CSVs; the entry point behind `plotdata`.
pub fn parse_forecast_csv(text: &str) -> Result<ForecastDoc> {
    let mut lines = text.lines();
    let banner = lines.next().ok_or_else(|| Error::parse("empty forecast file".to_string()))?;
    let config_hash = parse_banner(banner, FORECAST_FORMAT)?;
    let header = lines.next().ok_or_else(|| Error::parse("missing header row".to_string()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 5
        || cols[0] != "sample_id"
        || cols[1] != "position"
        || cols[2] != "observed_flag"
        || cols[3] != "truth"
        || cols[4] != "point"
    {
        return Err(Error::parse("unexpected forecast header".to_string()));
    }
    let n_draws = cols.len() - 5;
    if n_draws > MAX_CSV_DRAWS {
        return Err(Error::parse("too many draw columns".to_string()));
    }
    for (d, col) in cols[5..].iter().enumerate() {
        if *col != format!("draw_{d}") {
            return Err(Error::parse(format!("draw column {d} is named '{col}'")));
        }
    }
    let mut rows = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        if rows.len() >= MAX_CSV_ROWS {
            return Err(Error::parse("too many rows".to_string()));
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::parse(format!("line {}: field count {}", ln + 3, fields.len())));
        }
        let sample_id = fields[0]
            .parse::<u64>()
            .map_err(|_| Error::parse(format!("line {}: bad sample_id", ln + 3)))?;
        let position = fields[1]
            .parse::<usize>()
            .map_err(|_| Error::parse(format!("line {}: bad position", ln + 3)))?;
        let observed = match fields[2] {
            "0" => false,
            "1" => true,
            _ => return Err(Error::parse(format!("line {}: bad observed_flag", ln + 3))),
        };
        let truth = if fields[3].is_empty() {
            None
        } else {
            Some(parse_float(fields[3], ln + 3)?)
        };
        let point = parse_float(fields[4], ln + 3)?;
        let mut draws = Vec::with_capacity(n_draws);
        for f in &fields[5..] {
            draws.push(parse_float(f, ln + 3)?);
        }
        rows.push(ForecastRow { sample_id, position, observed, truth, point, draws });
    }
    Ok(ForecastDoc { config_hash, n_draws, rows })
}

fn parse_float(s: &str, line: usize) -> Result<f64> {
    let v = s.parse::<f64>().map_err(|_| Error::parse(format!("line {line}: bad number '{s}'")))?;
    if !v.is_finite() {
        return Err(Error::parse(format!("line {line}: non-finite number")));
    }
    Ok(v)
}

fn parse_banner(line: &str, want_format: &str) -> Result<String> {
    let rest = line
        .strip_prefix("# format=")
        .ok_or_else(|| Error::parse("missing format banner".to_string()))?;
    let (format, tail) = rest
        .split_once(" config=")
        .ok_or_else(|| Error::parse("banner missing config hash".to_string()))?;
    if format != want_format {
        return Err(Error::parse(format!("expected format {want_format}, got {format}")));
    }
    if tail.is_empty() || tail.len() > 64 || !tail.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(Error::parse("malformed config hash".to_string()));
    }
    Ok(tail.to_string())
}

/// Reshape a forecast document into tidy long rows:
/// (sample_id, position, observed_flag, series, value).
pub fn plotdata_to_string(doc: &ForecastDoc) -> String {
    let mut out = format!("# format={SERIES_FORMAT} config={}\n", doc.config_hash);
    out.push_str("sample_id,position,observed_flag,series,value\n");
    for r in &doc.rows {
        let mut push = |series: &str, v: f64| {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.sample_id,
                r.position,
                u8::from(r.observed),
                series,
                fmt_f64(v)
            ));
        };
        if let Some(t) = r.truth {
            push("truth", t);
        }
        push("point", r.point);
        for (d, v) in r.draws.iter().enumerate() {
            push(&format!("draw_{d}"), *v);
        }
    }
    out
}

// ---- evaluation grid ----

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub data_kind: DataKind,
    pub task: MaskKind,
    pub metric: &'static str,
    pub value: f64,
    pub n_samples: usize,
    pub config_hash: String,
}

pub fn eval_rows_to_string(rows: &[EvalRow], config_hash: &str) -> String {
    let mut out = format!("# format={EVAL_FORMAT} config={config_hash}\n");
    out.push_str("data_kind,task,metric,value,n_samples,config_hash\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.data_kind.name(),
            r.task.name(),
            r.metric,
            fmt_f64(r.value),
            r.n_samples,
            r.config_hash
        ));
    }
    out
}

pub fn write_eval_csv(path: &Path, rows: &[EvalRow], config_hash: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, eval_rows_to_string(rows, config_hash))?;
    Ok(())
}

/// Pooled metric values for one (kind, task) cell.
struct CellPools {
    truth: Vec<f64>,
    point: Vec<f64>,
    all_draw_values: Vec<f64>,
}

/// Run the full kind x task x metric grid over the test split.
///
/// Prediction tasks score the point forecast on predicted positions only.
/// The generation task pools every draw value against the pooled truth for
/// the distributional metric, and scores the point forecast over all
/// positions for MAE/NRMSE.
pub fn eval_grid(
    model: &Model,
    sched: &NoiseSchedule,
    test: &Dataset,
    eval: &EvalSection,
    seed: u64,
    config_hash: &str,
) -> Result<Vec<EvalRow>> {
    let l = test.header.l;
    let mut rows = Vec::new();
    for kind in DataKind::all() {
        let samples = test.of_kind(kind);
        if samples.is_empty() {
            continue;
        }
        let take = if eval.max_eval == 0 { samples.len() } else { eval.max_eval.min(samples.len()) };
        let samples = &samples[..take];
        for task in [MaskKind::ShortTerm, MaskKind::LongTerm, MaskKind::Generation] {
            let mask = match task {
                MaskKind::ShortTerm => MaskSpec::short_term(l, eval.short_horizon)?,
                MaskKind::LongTerm => MaskSpec::long_term(l, eval.long_horizon)?,
                MaskKind::Generation => MaskSpec::generation(l),
                MaskKind::Random => unreachable!(),
            };
            let units: Vec<ForecastUnit> = samples
                .iter()
                .map(|s| ForecastUnit { observed: s.values.clone(), mask: mask.clone(), env: s.env.clone() })
                .collect();
            let task_seed = seed ^ (0x100 * (kind.code() as u64 + 1) + task_code(task));
            let results = forecast_many(&units, kind, eval.n_samples, task_seed, model, sched)?;

            let mut pools = CellPools { truth: Vec::new(), point: Vec::new(), all_draw_values: Vec::new() };
            for (s, r) in samples.iter().zip(&results) {
                for t in 0..l {
                    if mask.mask[t] {
                        pools.truth.push(s.values[t]);
                        pools.point.push(r.point[t]);
                        for d in &r.draws {
                            pools.all_draw_values.push(d[t]);
                        }
                    }
                }
            }
            let jsd_input: &[f64] = if task == MaskKind::Generation { &pools.all_draw_values } else { &pools.point };
            let jsd = metrics::jsd(&pools.truth, jsd_input, metrics::DEFAULT_BINS)?;
            let mae = metrics::mae(&pools.truth, &pools.point)?;
            let nrmse = metrics::nrmse(&pools.truth, &pools.point)?;
            for (metric, value) in [("jsd", jsd), ("mae", mae), ("nrmse", nrmse)] {
                rows.push(EvalRow {
                    data_kind: kind,
                    task,
                    metric,
                    value,
                    n_samples: take,
                    config_hash: config_hash.to_string(),
                });
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::invalid("test split is empty".to_string()));
    }
    Ok(rows)
}

fn task_code(task: MaskKind) -> u64 {
    match task {
        MaskKind::ShortTerm => 1,
        MaskKind::LongTerm => 2,
        MaskKind::Generation => 3,
        MaskKind::Random => 4,
    }
}
