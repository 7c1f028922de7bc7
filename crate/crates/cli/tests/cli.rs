//! End-to-end CLI checks through the built binary.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mobiforge"))
}

fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let text = format!(
        "[run]\nseed = 5\n\
         [paths]\ndata_dir = {d}/data\ncheckpoint = {d}/model.ckpt\nreports_dir = {d}/reports\n\
         [data]\nn_train = 12\nn_test = 6\nlength = 16\n\
         [schedule]\nsteps = 8\n\
         [model]\nc0 = 8\nc_cond = 8\nn_blocks = 1\nn_heads = 2\nff_mult = 2\nfeat_dim = 4\n\
         [vae]\nhidden = 8\nepochs = 2\n\
         [train]\nepochs = 1\nbatch = 8\n\
         [eval]\nshort_horizon = 4\nlong_horizon = 12\nn_samples = 2\nmax_eval = 2\n\
         [forecast]\nn_samples = 3\nhorizon = 4\n",
        d = dir.display()
    );
    let path = dir.join("run.cfg");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn missing_config_is_runtime_error() {
    let out = bin().args(["eval", "--config", "/nonexistent/x.cfg"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_exits_zero() {
    let out = bin().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn pipeline_round_produces_grid_forecast_and_plotdata() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let cfg_s = cfg.to_str().unwrap();

    for sub in ["datagen", "train", "eval"] {
        let out = bin().args([sub, "--config", cfg_s]).output().unwrap();
        assert_eq!(
            out.status.code(),
            Some(0),
            "{sub} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let eval_text = std::fs::read_to_string(dir.path().join("reports/eval.csv")).unwrap();
    let rows: Vec<&str> = eval_text.lines().skip(2).collect();
    assert_eq!(rows.len(), 27, "3 kinds x 3 tasks x 3 metrics");
    assert!(eval_text.starts_with("# format=mobiforge.eval.v1 config="));

    let out = bin()
        .args(["forecast", "--config", cfg_s, "--task", "short", "--horizon", "4", "--sample-id", "0"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let fc_path = dir.path().join("reports/forecast.csv");
    let fc = std::fs::read_to_string(&fc_path).unwrap();
    let data_rows: Vec<&str> = fc.lines().skip(2).collect();
    assert_eq!(data_rows.len(), 16, "one row per position");
    let predicted = data_rows
        .iter()
        .filter(|r| r.split(',').nth(2) == Some("0"))
        .count();
    assert_eq!(data_rows.len() - predicted, 12, "4 of 16 positions predicted");

    let series = dir.path().join("series.csv");
    let out = bin()
        .args(["plotdata", "--in", fc_path.to_str().unwrap(), "--out", series.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let s = std::fs::read_to_string(&series).unwrap();
    assert!(s.starts_with("# format=mobiforge.series.v1 config="));
    assert!(s.lines().nth(1).unwrap().starts_with("sample_id,position,observed_flag,series,value"));
}

#[test]
fn bad_flag_value_is_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out = bin()
        .args(["forecast", "--config", cfg.to_str().unwrap(), "--kind", "nope"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
