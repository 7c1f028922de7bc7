//! Synthetic generators for the three mobile data kinds.
//!
//! Every latent driver a generator draws is written into the sample's
//! environment feature (or fixed in the generator config), so a trained
//! model's conditional behavior can be checked against closed forms. The
//! only randomness outside the env is the documented per-step noise term of
//! each generator.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::seeds;
use crate::tensor::Tensor;

/// Environment feature width for base-station traffic (C1).
pub const BS_ENV_DIM: usize = 8;
/// Per-step environment width for app traffic (C2): 4-way one-hot + intensity.
pub const APP_ENV_DIM: usize = 5;
/// Per-step environment width for RSRP (C3).
pub const RSRP_ENV_DIM: usize = 4;

/// RSRP normalization window: dBm values are clamped to this range and mapped
/// affinely onto [0, 1].
pub const RSRP_MIN_DBM: f64 = -120.0;
pub const RSRP_MAX_DBM: f64 = -40.0;

pub const MIN_SERIES_LEN: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DataKind {
    BsTraffic,
    AppTraffic,
    Rsrp,
}

impl DataKind {
    pub fn all() -> [DataKind; 3] {
        [DataKind::BsTraffic, DataKind::AppTraffic, DataKind::Rsrp]
    }

    /// Stable wire code (0, 1, 2).
    pub fn code(self) -> u8 {
        match self {
            DataKind::BsTraffic => 0,
            DataKind::AppTraffic => 1,
            DataKind::Rsrp => 2,
        }
    }

    pub fn from_code(c: u8) -> Result<DataKind> {
        match c {
            0 => Ok(DataKind::BsTraffic),
            1 => Ok(DataKind::AppTraffic),
            2 => Ok(DataKind::Rsrp),
            _ => Err(Error::parse(format!("unknown data kind code {c}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DataKind::BsTraffic => "bs",
            DataKind::AppTraffic => "app",
            DataKind::Rsrp => "rsrp",
        }
    }

    pub fn from_name(s: &str) -> Result<DataKind> {
        match s {
            "bs" => Ok(DataKind::BsTraffic),
            "app" => Ok(DataKind::AppTraffic),
            "rsrp" => Ok(DataKind::Rsrp),
            _ => Err(Error::invalid(format!("unknown data kind '{s}' (expected bs|app|rsrp)"))),
        }
    }

    pub fn env_cols(self) -> usize {
        match self {
            DataKind::BsTraffic => BS_ENV_DIM,
            DataKind::AppTraffic => APP_ENV_DIM,
            DataKind::Rsrp => RSRP_ENV_DIM,
        }
    }
}

/// Typed environment feature. BsTraffic carries one vector per sample; the
/// other two carry one row per time step.
#[derive(Clone, Debug, PartialEq)]
pub enum EnvFeature {
    /// Shape [C1].
    Bs(Tensor),
    /// Shape [L, C2].
    App(Tensor),
    /// Shape [L, C3].
    Rsrp(Tensor),
}

impl EnvFeature {
    pub fn kind(&self) -> DataKind {
        match self {
            EnvFeature::Bs(_) => DataKind::BsTraffic,
            EnvFeature::App(_) => DataKind::AppTraffic,
            EnvFeature::Rsrp(_) => DataKind::Rsrp,
        }
    }

    pub fn tensor(&self) -> &Tensor {
        match self {
            EnvFeature::Bs(t) | EnvFeature::App(t) | EnvFeature::Rsrp(t) => t,
        }
    }

    /// (rows, cols) of the flattened row-major layout used on the wire.
    pub fn wire_shape(&self) -> (usize, usize) {
        match self {
            EnvFeature::Bs(t) => (1, t.numel()),
            EnvFeature::App(t) | EnvFeature::Rsrp(t) => (t.dim(0), t.dim(1)),
        }
    }

    pub fn validate(&self, l: usize) -> Result<()> {
        let t = self.tensor();
        if !t.is_finite() {
            return Err(Error::numeric("non-finite env entry".to_string()));
        }
        match self {
            EnvFeature::Bs(t) => {
                if t.shape() != [BS_ENV_DIM] {
                    return Err(Error::shape(format!("bs env shape {:?}", t.shape())));
                }
            }
            EnvFeature::App(t) => {
                if t.shape() != [l, APP_ENV_DIM] {
                    return Err(Error::shape(format!("app env shape {:?}", t.shape())));
                }
                for r in 0..l {
                    let row = &t.data()[r * APP_ENV_DIM..r * APP_ENV_DIM + 4];
                    let sum: f64 = row.iter().sum();
                    if sum > 1.0 + 1e-9 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
                        return Err(Error::invalid(format!("app env row {r} is not one-hot-or-idle")));
                    }
                }
            }
            EnvFeature::Rsrp(t) => {
                if t.shape() != [l, RSRP_ENV_DIM] {
                    return Err(Error::shape(format!("rsrp env shape {:?}", t.shape())));
                }
            }
        }
        Ok(())
    }
}

/// One normalized length-L series plus its environment feature.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesSample {
    pub sample_id: u64,
    pub kind: DataKind,
    pub values: Vec<f64>,
    pub env: EnvFeature,
}

impl SeriesSample {
    pub fn validate(&self, l: usize) -> Result<()> {
        if self.values.len() != l {
            return Err(Error::shape(format!("series len {} != {l}", self.values.len())));
        }
        if self.values.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::invalid("series value outside [0, 1]".to_string()));
        }
        if self.env.kind() != self.kind {
            return Err(Error::invalid("env variant does not match sample kind".to_string()));
        }
        self.env.validate(l)
    }
}

fn check_n_l(n: usize, l: usize) -> Result<()> {
    if n < 1 {
        return Err(Error::invalid("sample count must be >= 1".to_string()));
    }
    if l < MIN_SERIES_LEN {
        return Err(Error::invalid(format!("series length must be >= {MIN_SERIES_LEN}")));
    }
    Ok(())
}

fn clip01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

// ---- base-station traffic ----

/// Per-sample drivers of a BS traffic series; stored in `BsEnv` as
/// [base, a1, a2, phi1 / 2pi, phi2 / 2pi, noise_scale, trend, poi_mix]
/// (phases as cycle fractions so every env entry is O(1)).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BsParams {
    pub base: f64,
    pub a1: f64,
    pub a2: f64,
    pub phi1: f64,
    pub phi2: f64,
    pub noise_scale: f64,
    pub trend: f64,
    pub poi_mix: f64,
}

impl BsParams {
    pub fn to_env(&self) -> EnvFeature {
        use std::f64::consts::TAU;
        EnvFeature::Bs(Tensor::new(
            vec![BS_ENV_DIM],
            vec![
                self.base,
                self.a1,
                self.a2,
                self.phi1 / TAU,
                self.phi2 / TAU,
                self.noise_scale,
                self.trend,
                self.poi_mix,
            ],
        ))
    }

    pub fn from_env(env: &EnvFeature) -> Result<BsParams> {
        use std::f64::consts::TAU;
        match env {
            EnvFeature::Bs(t) if t.numel() == BS_ENV_DIM => {
                let d = t.data();
                Ok(BsParams {
                    base: d[0],
                    a1: d[1],
                    a2: d[2],
                    phi1: d[3] * TAU,
                    phi2: d[4] * TAU,
                    noise_scale: d[5],
                    trend: d[6],
                    poi_mix: d[7],
                })
            }
            _ => Err(Error::invalid("expected a BsEnv vector".to_string())),
        }
    }

    /// Noise-free signal before clipping: two diurnal harmonics plus a
    /// linear trend.
    pub fn clean_value(&self, t: usize, l: usize) -> f64 {
        use std::f64::consts::PI;
        self.base
            + self.a1 * (2.0 * PI * t as f64 / 24.0 + self.phi1).sin()
            + self.a2 * (2.0 * PI * t as f64 / 12.0 + self.phi2).sin()
            + self.trend * t as f64 / l as f64
    }

    /// Mean of the clipped clean signal over the series; the conditional
    /// oracle used by generation-fidelity tests.
    pub fn clean_mean(&self, l: usize) -> f64 {
        (0..l).map(|t| clip01(self.clean_value(t, l))).sum::<f64>() / l as f64
    }
}

/// Parameter ranges the BS generator draws from.
#[derive(Clone, Debug)]
pub struct BsGenConfig {
    pub base: (f64, f64),
    pub a1: (f64, f64),
    pub a2: (f64, f64),
    pub noise_scale: (f64, f64),
    pub trend: (f64, f64),
}

impl Default for BsGenConfig {
    fn default() -> Self {
        BsGenConfig {
            base: (0.35, 0.65),
            a1: (0.10, 0.25),
            a2: (0.03, 0.10),
            noise_scale: (0.005, 0.02),
            trend: (-0.08, 0.08),
        }
    }
}

/// One BS series from explicit drivers; shared by the generator and the
/// acceptance oracles.
pub fn bs_series_from_params(p: &BsParams, l: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..l)
        .map(|t| {
            let noise: f64 = if p.noise_scale > 0.0 {
                p.noise_scale * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            clip01(p.clean_value(t, l) + noise)
        })
        .collect()
}

pub fn gen_bs_traffic(seed: u64, n: usize, l: usize) -> Result<Vec<SeriesSample>> {
    gen_bs_traffic_with(&BsGenConfig::default(), seed, n, l)
}

pub fn gen_bs_traffic_with(cfg: &BsGenConfig, seed: u64, n: usize, l: usize) -> Result<Vec<SeriesSample>> {
    use std::f64::consts::PI;
    check_n_l(n, l)?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = seeds::stream(seed, "datagen.bs", i as u64);
        let p = BsParams {
            base: rng.random_range(cfg.base.0..=cfg.base.1),
            a1: rng.random_range(cfg.a1.0..=cfg.a1.1),
            a2: rng.random_range(cfg.a2.0..=cfg.a2.1),
            phi1: rng.random_range(0.0..2.0 * PI),
            phi2: rng.random_range(0.0..2.0 * PI),
            noise_scale: rng.random_range(cfg.noise_scale.0..=cfg.noise_scale.1),
            trend: rng.random_range(cfg.trend.0..=cfg.trend.1),
            poi_mix: rng.random_range(0.0..=1.0),
        };
        let values = bs_series_from_params(&p, l, &mut rng);
        out.push(SeriesSample { sample_id: i as u64, kind: DataKind::BsTraffic, values, env: p.to_env() });
    }
    Ok(out)
}

// ---- app traffic ----

/// Markov on/off burst process. A burst picks one of four app types; while
/// on, the value is `intensity * app_mean[type]` exactly, else 0.
#[derive(Clone, Debug)]
pub struct AppGenConfig {
    /// off -> on transition probability per step.
    pub p_on: f64,
    /// on -> off transition probability per step.
    pub p_off: f64,
    pub app_means: [f64; 4],
    pub intensity: (f64, f64),
}

impl Default for AppGenConfig {
    fn default() -> Self {
        AppGenConfig {
            p_on: 0.12,
            p_off: 0.28,
            app_means: [0.30, 0.55, 0.75, 0.95],
            intensity: (0.5, 1.0),
        }
    }
}

impl AppGenConfig {
    /// Stationary probability of the on state.
    pub fn on_rate(&self) -> f64 {
        if self.p_on + self.p_off == 0.0 {
            0.0
        } else {
            self.p_on / (self.p_on + self.p_off)
        }
    }
}

pub fn gen_app_traffic(seed: u64, n: usize, l: usize) -> Result<Vec<SeriesSample>> {
    gen_app_traffic_with(&AppGenConfig::default(), seed, n, l)
}

pub fn gen_app_traffic_with(cfg: &AppGenConfig, seed: u64, n: usize, l: usize) -> Result<Vec<SeriesSample>> {
    check_n_l(n, l)?;
    if !(0.0..=1.0).contains(&cfg.p_on) || !(0.0..=1.0).contains(&cfg.p_off) {
        return Err(Error::invalid("transition probabilities must lie in [0, 1]".to_string()));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = seeds::stream(seed, "datagen.app", i as u64);
        let intensity = rng.random_range(cfg.intensity.0..=cfg.intensity.1);
        let mut on = rng.random_range(0.0..1.0) < cfg.on_rate();
        let mut app: usize = rng.random_range(0..4);
        let mut values = Vec::with_capacity(l);
        let mut env = vec![0.0; l * APP_ENV_DIM];
        for t in 0..l {
            if on {
                if rng.random_range(0.0..1.0) < cfg.p_off {
                    on = false;
                }
            } else if rng.random_range(0.0..1.0) < cfg.p_on {
                on = true;
                app = rng.random_range(0..4);
            }
            let row = &mut env[t * APP_ENV_DIM..(t + 1) * APP_ENV_DIM];
            row[4] = intensity;
            if on {
                row[app] = 1.0;
                values.push(intensity * cfg.app_means[app]);
            } else {
                values.push(0.0);
            }
        }
        out.push(SeriesSample {
            sample_id: i as u64,
            kind: DataKind::AppTraffic,
            values,
            env: EnvFeature::App(Tensor::new(vec![l, APP_ENV_DIM], env)),
        });
    }
    Ok(out)
}

// ---- downlink RSRP ----

/// Closed-form received power for the log-distance model.
pub fn rsrp_dbm(p_tx_dbm: f64, pl0: f64, path_loss_exp: f64, d: f64, tilt_penalty_db: f64, shadow_db: f64) -> f64 {
    p_tx_dbm - (pl0 + 10.0 * path_loss_exp * d.log10()) - tilt_penalty_db + shadow_db
}

/// Clamp to the RSRP window and map onto [0, 1].
pub fn normalize_rsrp(dbm: f64) -> f64 {
    (dbm.clamp(RSRP_MIN_DBM, RSRP_MAX_DBM) - RSRP_MIN_DBM) / (RSRP_MAX_DBM - RSRP_MIN_DBM)
}

#[derive(Clone, Debug)]
pub struct RsrpGenConfig {
    /// Reference path loss at 1 m (dB).
    pub pl0: f64,
    /// Path-loss exponent; fixed for the whole corpus so every per-sample
    /// driver lives in the env rows.
    pub path_loss_exp: f64,
    pub p_tx_dbm: (f64, f64),
    pub tilt_deg: (f64, f64),
    /// Extra attenuation per degree of downtilt (dB).
    pub tilt_penalty_per_deg: f64,
    /// Shadowing sigma (dB) per terrain class 0..=3.
    pub shadow_sigma: [f64; 4],
    /// Initial distance range (m) and multiplicative walk sigma.
    pub d0: (f64, f64),
    pub walk_sigma: f64,
    pub d_bounds: (f64, f64),
}

impl Default for RsrpGenConfig {
    fn default() -> Self {
        RsrpGenConfig {
            pl0: 30.0,
            path_loss_exp: 3.5,
            p_tx_dbm: (40.0, 46.0),
            tilt_deg: (0.0, 10.0),
            tilt_penalty_per_deg: 0.5,
            shadow_sigma: [2.0, 4.0, 6.0, 8.0],
            d0: (50.0, 500.0),
            walk_sigma: 0.03,
            d_bounds: (20.0, 2000.0),
        }
    }
}

/// Env row layout: [log10(d_t), (p_tx - 40) / 6, tilt_deg / 10, terrain / 3].
pub fn rsrp_env_row(d: f64, p_tx_dbm: f64, tilt_deg: f64, terrain: u8) -> [f64; RSRP_ENV_DIM] {
    [d.log10(), (p_tx_dbm - 40.0) / 6.0, tilt_deg / 10.0, terrain as f64 / 3.0]
}

pub fn gen_rsrp(seed: u64, n: usize, l: usize) -> Result<Vec<SeriesSample>> {
    gen_rsrp_with(&RsrpGenConfig::default(), seed, n, l)
}

pub fn gen_rsrp_with(cfg: &RsrpGenConfig, seed: u64, n: usize, l: usize) -> Result<Vec<SeriesSample>> {
    check_n_l(n, l)?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = seeds::stream(seed, "datagen.rsrp", i as u64);
        let p_tx = rng.random_range(cfg.p_tx_dbm.0..=cfg.p_tx_dbm.1);
        let tilt = rng.random_range(cfg.tilt_deg.0..=cfg.tilt_deg.1);
        let terrain: u8 = rng.random_range(0..4);
        let sigma = cfg.shadow_sigma[terrain as usize];
        let mut d = rng.random_range(cfg.d0.0..=cfg.d0.1);
        let mut values = Vec::with_capacity(l);
        let mut env = vec![0.0; l * RSRP_ENV_DIM];
        for t in 0..l {
            let shadow = sigma * rng.sample::<f64, _>(StandardNormal);
            let dbm = rsrp_dbm(p_tx, cfg.pl0, cfg.path_loss_exp, d, cfg.tilt_penalty_per_deg * tilt, shadow);
            values.push(normalize_rsrp(dbm));
            env[t * RSRP_ENV_DIM..(t + 1) * RSRP_ENV_DIM]
                .copy_from_slice(&rsrp_env_row(d, p_tx, tilt, terrain));
            let step: f64 = cfg.walk_sigma * rng.sample::<f64, _>(StandardNormal);
            d = (d * step.exp()).clamp(cfg.d_bounds.0, cfg.d_bounds.1);
        }
        out.push(SeriesSample {
            sample_id: i as u64,
            kind: DataKind::Rsrp,
            values,
            env: EnvFeature::Rsrp(Tensor::new(vec![l, RSRP_ENV_DIM], env)),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bs_contract_and_determinism() {
        let a = gen_bs_traffic(7, 2, 64).unwrap();
        assert_eq!(a.len(), 2);
        for s in &a {
            s.validate(64).unwrap();
            assert_eq!(s.env.tensor().numel(), BS_ENV_DIM);
        }
        let b = gen_bs_traffic(7, 2, 64).unwrap();
        assert_eq!(a, b);
        let c = gen_bs_traffic(8, 2, 64).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn bs_closed_form_peak() {
        // sin peak of the 24-period harmonic at t = 6
        let p = BsParams {
            base: 0.5,
            a1: 0.3,
            a2: 0.0,
            phi1: 0.0,
            phi2: 0.0,
            noise_scale: 0.0,
            trend: 0.0,
            poi_mix: 0.0,
        };
        let mut rng = seeds::stream(0, "t", 0);
        let v = bs_series_from_params(&p, 64, &mut rng);
        assert!((v[6] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn bs_params_roundtrip_env() {
        let s = &gen_bs_traffic(3, 1, 64).unwrap()[0];
        let p = BsParams::from_env(&s.env).unwrap();
        let back = p.to_env();
        for (a, b) in back.tensor().data().iter().zip(s.env.tensor().data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bs_rejects_bad_args() {
        assert!(gen_bs_traffic(0, 0, 64).is_err());
        assert!(gen_bs_traffic(0, 1, 4).is_err());
    }

    #[test]
    fn app_degenerate_chain_is_silent() {
        let cfg = AppGenConfig { p_on: 0.0, ..Default::default() };
        let samples = gen_app_traffic_with(&cfg, 1, 3, 64).unwrap();
        for s in &samples {
            assert!(s.values.iter().all(|&v| v == 0.0));
            if let EnvFeature::App(t) = &s.env {
                for r in 0..64 {
                    let onehot: f64 = t.data()[r * APP_ENV_DIM..r * APP_ENV_DIM + 4].iter().sum();
                    assert_eq!(onehot, 0.0);
                }
            } else {
                panic!("wrong env variant");
            }
        }
    }

    #[test]
    fn app_values_recoverable_from_env() {
        let cfg = AppGenConfig::default();
        for s in gen_app_traffic_with(&cfg, 5, 4, 64).unwrap() {
            let t = s.env.tensor();
            for step in 0..64 {
                let row = &t.data()[step * APP_ENV_DIM..(step + 1) * APP_ENV_DIM];
                let ty = (0..4).find(|&j| row[j] == 1.0);
                match ty {
                    Some(j) => assert_eq!(s.values[step], row[4] * cfg.app_means[j]),
                    None => assert_eq!(s.values[step], 0.0),
                }
            }
        }
    }

    #[test]
    fn app_on_rate_matches_config() {
        let cfg = AppGenConfig::default();
        let samples = gen_app_traffic_with(&cfg, 2, 1000, 64).unwrap();
        let total: usize = samples.iter().map(|s| s.values.iter().filter(|&&v| v > 0.0).count()).sum();
        let rate = total as f64 / (1000.0 * 64.0);
        let want = cfg.on_rate();
        assert!(
            (rate - want).abs() <= 0.1 * want,
            "empirical on-rate {rate} vs configured {want}"
        );
    }

    #[test]
    fn rsrp_closed_form() {
        let dbm = rsrp_dbm(43.0, 30.0, 3.5, 100.0, 0.0, 0.0);
        assert!((dbm - (-57.0)).abs() < 1e-12);
        assert!((normalize_rsrp(dbm) - 0.7875).abs() < 1e-12);
    }

    #[test]
    fn rsrp_clamps_floor() {
        assert_eq!(normalize_rsrp(-130.0), 0.0);
        assert_eq!(normalize_rsrp(-30.0), 1.0);
    }

    #[test]
    fn rsrp_monotone_in_distance() {
        let f = |d: f64| normalize_rsrp(rsrp_dbm(43.0, 30.0, 3.5, d, 2.0, 0.0));
        let mut prev = f(20.0);
        for i in 1..50 {
            let cur = f(20.0 + 40.0 * i as f64);
            assert!(cur <= prev, "larger distance must not raise the value");
            prev = cur;
        }
    }

    #[test]
    fn rsrp_samples_valid() {
        for s in gen_rsrp(9, 3, 64).unwrap() {
            s.validate(64).unwrap();
        }
    }

    #[test]
    fn app_samples_valid() {
        for s in gen_app_traffic(9, 3, 64).unwrap() {
            s.validate(64).unwrap();
        }
    }
}
