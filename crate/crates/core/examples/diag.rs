// Scratch diagnostics for the reverse chain (not shipped).

use mobiforge::backbone::ModelConfig;
use mobiforge::datagen::{gen_bs_traffic, DataKind, SeriesSample};
use mobiforge::dataset::Dataset;
use mobiforge::masking::MaskSpec;
use mobiforge::model::{bind_model, foundation_loss_g, Batch, LossInputs, Model};
use mobiforge::graph::Graph;
use mobiforge::schedule::{build_schedule, reverse_step};
use mobiforge::seeds;
use mobiforge::semantic_vae::{pretrain_single_vae, VaeTrainConfig};
use mobiforge::tensor::Tensor;
use mobiforge::training::{train_loop, TrainConfig, TrainRun};

fn main() {
    let l = 64;
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(12);
    let beta_end: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(0.2);
    let mode: String = std::env::args().nth(3).unwrap_or_default();
    let clamp_state: bool = mode == "clamp";
    let clip_x0: bool = mode == "clip0";

    let train_samples = gen_bs_traffic(1001, 2000, l).unwrap();
    let test_samples = gen_bs_traffic(2002, 64, l).unwrap();
    let train = Dataset::from_parts(l, vec![train_samples]).unwrap();

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
    let mut model = Model::init(cfg, 77).unwrap();
    let refs: Vec<&SeriesSample> = train.samples.iter().collect();
    let vcfg = VaeTrainConfig { c0: cfg.c0, hidden: 32, epochs: 60, lr: 1e-3, batch: 64, seed: 77 };
    let (vae, _) = pretrain_single_vae(DataKind::BsTraffic, &refs, l, &vcfg).unwrap();
    model.vaes.bs = vae;

    let tcfg = TrainConfig {
        epochs,
        batch: 32,
        lr: 2e-3,
        seed: 77,
        k: 50,
        beta_end,
        val_fraction: 0.05,
        ..Default::default()
    };
    let dir = std::env::temp_dir().join("mobiforge_diag");
    std::fs::create_dir_all(&dir).unwrap();
    train_loop(&train, &mut model, &tcfg, &TrainRun {
        checkpoint_path: &dir.join("diag.ckpt"),
        log_path: None,
        config_hash: "diag".to_string(),
    })
    .unwrap();
    let sched = build_schedule(tcfg.k, tcfg.beta_start, tcfg.beta_end).unwrap();
    println!("alpha_bar[K-1] = {:.5}", sched.alpha_bar[tcfg.k - 1]);

    // per-k denoising quality under the generation mask
    let refs: Vec<&SeriesSample> = test_samples.iter().take(32).collect();
    let batch = Batch::from_samples(&refs, l).unwrap();
    let mask = MaskSpec::generation(l);
    for &k in &[0usize, 5, 15, 30, 45, 49] {
        let mut rng = seeds::stream(5, "diag.k", k as u64);
        let eps = Tensor::randn(&[32, l, cfg.c0], &mut rng);
        let ks = vec![k; 32];
        let mut g = Graph::new();
        let vars = bind_model(&mut g, &model, false, false);
        let out = foundation_loss_g(
            &mut g,
            &model,
            &vars,
            &LossInputs { batch: &batch, ks: &ks, eps: &eps, mask: &mask, lambda_rec: 0.0, force_eps_hat_equals_eps: false },
            &sched,
        )
        .unwrap();
        println!("k={k:2}  gen-mask eps-mse {:.4}", g.value(out.denoise).item());
    }

    // reverse chain trajectory for 8 generation draws
    let b = 8;
    let units: Vec<&SeriesSample> = test_samples.iter().take(b).collect();
    let env_batch = Batch {
        series: Tensor::zeros(&[b, l, 1]),
        envs: units.iter().map(|s| s.env.clone()).collect(),
        kinds: vec![DataKind::BsTraffic; b],
    };
    // reachable token range per channel for series values in [0, 1]
    let tokw = model.backbone.store.get(model.backbone.tok_w);
    let tokb = model.backbone.store.get(model.backbone.tok_b);
    let mut bound = vec![0.0f64; cfg.c0];
    let mut tok_lo = vec![0.0f64; cfg.c0];
    let mut tok_hi = vec![0.0f64; cfg.c0];
    for c in 0..cfg.c0 {
        let w1: f64 = (0..3).map(|j| tokw.data()[c * 3 + j].abs()).sum();
        bound[c] = w1 + tokb.data()[c].abs();
        let neg: f64 = (0..3).map(|j| tokw.data()[c * 3 + j].min(0.0)).sum();
        let pos: f64 = (0..3).map(|j| tokw.data()[c * 3 + j].max(0.0)).sum();
        tok_lo[c] = tokb.data()[c] + neg;
        tok_hi[c] = tokb.data()[c] + pos;
    }
    let mut rng = seeds::stream(11, "diag.chain", 0);
    let mut state = Tensor::randn(&[b, l, cfg.c0], &mut rng);
    for k in (0..sched.k()).rev() {
        let eps_hat = mobiforge::model::predict_eps_for_state(&model, &state, k, &env_batch).unwrap();
        let z = if k > 0 { Tensor::randn(&[b, l, cfg.c0], &mut rng) } else { Tensor::zeros(&[b, l, cfg.c0]) };
        if clip_x0 {
            // posterior-mean form with the implied x0 clipped to the
            // reachable token range
            let ab_k = sched.alpha_bar[k];
            let ab_prev = if k > 0 { sched.alpha_bar[k - 1] } else { 1.0 };
            let beta_k = sched.beta[k];
            let alpha_k = sched.alpha[k];
            let c0_coef = ab_prev.sqrt() * beta_k / (1.0 - ab_k);
            let ck_coef = alpha_k.sqrt() * (1.0 - ab_prev) / (1.0 - ab_k);
            let sigma = beta_k.sqrt();
            let mut next = Tensor::zeros(&[b, l, cfg.c0]);
            for bi in 0..b {
                for t in 0..l {
                    for c in 0..cfg.c0 {
                        let idx = state.idx3(bi, t, c);
                        let xk = state.data()[idx];
                        let x0 = (xk - (1.0 - ab_k).sqrt() * eps_hat.data()[idx]) / ab_k.sqrt();
                        let x0c = x0.clamp(tok_lo[c] - 0.05, tok_hi[c] + 0.05);
                        let zv = if k > 0 { z.data()[idx] } else { 0.0 };
                        next.data_mut()[idx] = c0_coef * x0c + ck_coef * xk + sigma * zv;
                    }
                }
            }
            state = next;
            if k % 10 == 0 || k == sched.k() - 1 {
                let rms = (state.data().iter().map(|v| v * v).sum::<f64>() / state.numel() as f64).sqrt();
                let eps_rms = (eps_hat.data().iter().map(|v| v * v).sum::<f64>() / eps_hat.numel() as f64).sqrt();
                println!("k={k:2}  state rms {rms:8.3}  eps_hat rms {eps_rms:8.3}");
            }
            continue;
        }
        state = reverse_step(&state, &eps_hat, k, &z, &sched).unwrap();
        if clamp_state {
            let ab = if k > 0 { sched.alpha_bar[k - 1] } else { 1.0 };
            let noise_w = (1.0 - ab).sqrt() * 4.0;
            for bi in 0..b {
                for t in 0..l {
                    for c in 0..cfg.c0 {
                        let cap = ab.sqrt() * bound[c] + noise_w;
                        let idx = state.idx3(bi, t, c);
                        state.data_mut()[idx] = state.data()[idx].clamp(-cap, cap);
                    }
                }
            }
        }
        if k % 10 == 0 || k == sched.k() - 1 {
            let rms = (state.data().iter().map(|v| v * v).sum::<f64>() / state.numel() as f64).sqrt();
            let eps_rms = (eps_hat.data().iter().map(|v| v * v).sum::<f64>() / eps_hat.numel() as f64).sqrt();
            println!("k={k:2}  state rms {rms:8.3}  eps_hat rms {eps_rms:8.3}");
        }
    }
    let series = mobiforge::model::detokenize_batch(&model, &state).unwrap();
    let lo = series.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = series.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean = series.data().iter().sum::<f64>() / series.numel() as f64;
    println!("detok pre-clamp: min {lo:.3} max {hi:.3} mean {mean:.3}");
    let frac_in: f64 = series.data().iter().filter(|v| (0.0..=1.0).contains(*v)).count() as f64 / series.numel() as f64;
    println!("fraction inside [0,1]: {frac_in:.3}");
}
