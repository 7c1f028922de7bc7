// Scratch calibration run for the desk-scale settings (not shipped).

use std::time::Instant;

use mobiforge::backbone::ModelConfig;
use mobiforge::baselines;
use mobiforge::datagen::{gen_bs_traffic, DataKind, SeriesSample};
use mobiforge::dataset::Dataset;
use mobiforge::masking::MaskSpec;
use mobiforge::metrics;
use mobiforge::model::Model;
use mobiforge::sampler::{forecast_many_with, ForecastUnit, InpaintMode};
use mobiforge::schedule::build_schedule;
use mobiforge::semantic_vae::{pretrain_single_vae, recon_mse, VaeTrainConfig};
use mobiforge::training::{train_loop, TrainConfig, TrainRun};

fn main() {
    let t0 = Instant::now();
    let l = 64;
    let n_train = 2000;
    let n_test = 160;

    let train_samples = gen_bs_traffic(100, n_train, l).unwrap();
    let test_samples = gen_bs_traffic(200, n_test, l).unwrap();
    let train = Dataset::from_parts(l, vec![train_samples]).unwrap();
    println!("[{:.1}s] data ready", t0.elapsed().as_secs_f64());

    let cfg = ModelConfig {
        l,
        c0: 32,
        c_cond: 32,
        n_blocks: 2,
        n_heads: 4,
        ff_mult: 4,
        feat_dim: 8,
        vae_hidden: 32,
        m_top: 4,
        ..Default::default()
    };
    let mut model = Model::init(cfg, 42).unwrap();

    // VAE pretraining on the bs envs
    let refs: Vec<&SeriesSample> = train.samples.iter().collect();
    let vcfg = VaeTrainConfig { c0: cfg.c0, hidden: 32, epochs: 60, lr: 1e-3, batch: 64, seed: 42 };
    let (vae, losses) = pretrain_single_vae(DataKind::BsTraffic, &refs, l, &vcfg).unwrap();
    let held: Vec<&mobiforge::datagen::EnvFeature> = test_samples.iter().map(|s| &s.env).collect();
    let mse = recon_mse(&vae, &held, l).unwrap();
    println!(
        "[{:.1}s] vae: final loss {:.4}, held-out recon mse {:.5}",
        t0.elapsed().as_secs_f64(),
        losses.last().unwrap(),
        mse
    );
    model.vaes.bs = vae;

    let tcfg = TrainConfig {
        epochs: std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10),
        batch: 32,
        lr: std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3),
        seed: 42,
        k: 50,
        beta_end: std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(0.05),
        val_fraction: 0.05,
        ..Default::default()
    };
    println!(
        "alpha_bar[K-1] = {:.5}",
        build_schedule(tcfg.k, tcfg.beta_start, tcfg.beta_end)
            .unwrap()
            .alpha_bar[tcfg.k - 1]
    );
    let dir = std::env::temp_dir().join("mobiforge_calibrate");
    std::fs::create_dir_all(&dir).unwrap();
    let ckpt = dir.join("cal.ckpt");
    let logs = train_loop(&train, &mut model, &tcfg, &TrainRun {
        checkpoint_path: &ckpt,
        log_path: None,
        config_hash: "cal".to_string(),
    })
    .unwrap();
    for e in &logs {
        if e.split == "train" {
            println!("  epoch {} train {:.5} ({:.1}s)", e.epoch, e.loss, e.wall_time_s);
        }
    }
    println!("[{:.1}s] training done", t0.elapsed().as_secs_f64());

    // codec reconstruction quality
    let mut probe = mobiforge::tensor::Tensor::zeros(&[test_samples.len().min(64), l, 1]);
    for (i, s) in test_samples.iter().take(64).enumerate() {
        probe.data_mut()[i * l..(i + 1) * l].copy_from_slice(&s.values);
    }
    let tok = mobiforge::model::tokenize_batch(&model, &probe).unwrap();
    let rec = mobiforge::model::detokenize_batch(&model, &tok).unwrap();
    let codec_mse: f64 = probe
        .data()
        .iter()
        .zip(rec.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / probe.numel() as f64;
    println!("[{:.1}s] codec mse {:.6}", t0.elapsed().as_secs_f64(), codec_mse);

    let sched = build_schedule(tcfg.k, tcfg.beta_start, tcfg.beta_end).unwrap();
    for mode in [InpaintMode::CleanContext, InpaintMode::NoisedContext] {
        for (task, h) in [("short", 8usize), ("long", 48)] {
            let mask = if task == "short" {
                MaskSpec::short_term(l, h).unwrap()
            } else {
                MaskSpec::long_term(l, h).unwrap()
            };
            let units: Vec<ForecastUnit> = test_samples
                .iter()
                .map(|s| ForecastUnit { observed: s.values.clone(), mask: mask.clone(), env: s.env.clone() })
                .collect();
            let results =
                forecast_many_with(&units, DataKind::BsTraffic, 4, 7, &model, &sched, mode).unwrap();
            let mut truth = Vec::new();
            let mut pred = Vec::new();
            let mut copy = Vec::new();
            let mut meanb = Vec::new();
            for (s, r) in test_samples.iter().zip(&results) {
                let cl = baselines::copy_last(&s.values, &mask).unwrap();
                let mb = baselines::observed_mean(&s.values, &mask).unwrap();
                for t in 0..l {
                    if mask.mask[t] {
                        truth.push(s.values[t]);
                        pred.push(r.point[t]);
                        copy.push(cl[t]);
                        meanb.push(mb[t]);
                    }
                }
            }
            let mae_model = metrics::mae(&truth, &pred).unwrap();
            let mae_copy = metrics::mae(&truth, &copy).unwrap();
            let mae_mean = metrics::mae(&truth, &meanb).unwrap();
            println!(
                "[{:.1}s] {mode:?} {task}: model {:.4} copy-last {:.4} (ratio {:.3}) mean-baseline {:.4}",
                t0.elapsed().as_secs_f64(),
                mae_model,
                mae_copy,
                mae_model / mae_copy,
                mae_mean
            );
        }
    }
    // generation fidelity probes
    let gen_units: Vec<ForecastUnit> = test_samples
        .iter()
        .take(100)
        .map(|s| ForecastUnit {
            observed: vec![0.0; l],
            mask: MaskSpec::generation(l),
            env: s.env.clone(),
        })
        .collect();
    let gen = forecast_many_with(&gen_units, DataKind::BsTraffic, 2, 13, &model, &sched, InpaintMode::CleanContext).unwrap();
    let mut gen_pool = Vec::new();
    for r in &gen {
        for d in &r.draws {
            gen_pool.extend_from_slice(d);
        }
    }
    let mut truth_pool = Vec::new();
    for s in &test_samples {
        truth_pool.extend_from_slice(&s.values);
    }
    let mut rng = mobiforge::seeds::stream(99, "uniform", 0);
    let uniform: Vec<f64> = (0..truth_pool.len()).map(|_| rand::Rng::random_range(&mut rng, 0.0..1.0)).collect();
    let jsd_gen = metrics::jsd(&gen_pool, &truth_pool, 50).unwrap();
    let jsd_uni = metrics::jsd(&uniform, &truth_pool, 50).unwrap();
    println!(
        "[{:.1}s] gen jsd {:.4} vs uniform jsd {:.4} (ratio {:.3})",
        t0.elapsed().as_secs_f64(),
        jsd_gen,
        jsd_uni,
        jsd_gen / jsd_uni
    );

    // env-conditioning ordering: base 0.35 vs 0.65
    let mk_env = |base: f64| {
        mobiforge::datagen::BsParams {
            base,
            a1: 0.1,
            a2: 0.03,
            phi1: 1.0,
            phi2: 2.0,
            noise_scale: 0.01,
            trend: 0.0,
            poi_mix: 0.5,
        }
        .to_env()
    };
    let mut wins = 0;
    let trials = 50;
    for t in 0..trials {
        let lo = mobiforge::sampler::generate(DataKind::BsTraffic, &mk_env(0.35), 1, 1000 + t, &model, &sched).unwrap();
        let hi = mobiforge::sampler::generate(DataKind::BsTraffic, &mk_env(0.65), 1, 2000 + t, &model, &sched).unwrap();
        let m_lo: f64 = lo[0].iter().sum::<f64>() / l as f64;
        let m_hi: f64 = hi[0].iter().sum::<f64>() / l as f64;
        if m_hi > m_lo {
            wins += 1;
        }
    }
    println!("[{:.1}s] env ordering: {wins}/{trials}", t0.elapsed().as_secs_f64());
    println!("[{:.1}s] total", t0.elapsed().as_secs_f64());
}
