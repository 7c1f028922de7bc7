//! Evaluation metrics: the distributional divergence (symmetrized KL under a
//! square root), MAE, and range-normalized RMSE.

use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 50;
pub const DEFAULT_SMOOTHING: f64 = 1e-10;

/// Uniform-bin histogram over the pooled range of both inputs, additively
/// smoothed and renormalized.
#[derive(Clone, Debug)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub probs: Vec<f64>,
}

impl Histogram {
    /// Build histograms for `a` and `b` over their pooled min..max.
    pub fn paired(a: &[f64], b: &[f64], bins: usize, smoothing: f64) -> Result<(Histogram, Histogram)> {
        if a.is_empty() || b.is_empty() {
            return Err(Error::invalid("histogram inputs must be nonempty".to_string()));
        }
        if bins < 1 {
            return Err(Error::invalid("need at least one bin".to_string()));
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in a.iter().chain(b) {
            if !v.is_finite() {
                return Err(Error::numeric("non-finite metric input".to_string()));
            }
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if lo == hi {
            // all mass in one bin either way; widen to keep edges distinct
            hi = lo + 1.0;
        }
        let edges: Vec<f64> = (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect();
        let fill = |xs: &[f64]| {
            let mut counts = vec![0.0f64; bins];
            for &v in xs {
                let mut idx = ((v - lo) / (hi - lo) * bins as f64) as usize;
                if idx >= bins {
                    idx = bins - 1;
                }
                counts[idx] += 1.0;
            }
            let total: f64 = counts.iter().sum::<f64>() + smoothing * bins as f64;
            let probs = counts.iter().map(|c| (c + smoothing) / total).collect();
            Histogram { edges: edges.clone(), probs }
        };
        Ok((fill(a), fill(b)))
    }
}

fn kl(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .filter(|(&x, _)| x > 0.0)
        .map(|(&x, &y)| x * (x / y).ln())
        .sum()
}

/// Symmetrized KL between probability vectors, under a square root
/// (natural log). This is the divergence the evaluation grid reports.
pub fn jsd_from_probs(p: &[f64], q: &[f64]) -> f64 {
    ((kl(p, q) + kl(q, p)) / 2.0).max(0.0).sqrt()
}

/// Standard mixture-based Jensen-Shannon divergence (bounded by ln 2);
/// available as an alternative, not used by the evaluation grid.
pub fn jsd_mixture_from_probs(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = p.iter().zip(q).map(|(&a, &b)| 0.5 * (a + b)).collect();
    (0.5 * kl(p, &m) + 0.5 * kl(q, &m)).max(0.0)
}

/// Mixture-based JSD over histograms of raw values.
pub fn jsd_mixture(y: &[f64], y_hat: &[f64], bins: usize) -> Result<f64> {
    let (p, q) = Histogram::paired(y, y_hat, bins, DEFAULT_SMOOTHING)?;
    Ok(jsd_mixture_from_probs(&p.probs, &q.probs))
}

/// Distributional divergence between two value collections with `bins`
/// uniform bins over the pooled range and default smoothing.
pub fn jsd(y: &[f64], y_hat: &[f64], bins: usize) -> Result<f64> {
    jsd_with_smoothing(y, y_hat, bins, DEFAULT_SMOOTHING)
}

pub fn jsd_with_smoothing(y: &[f64], y_hat: &[f64], bins: usize, smoothing: f64) -> Result<f64> {
    let (p, q) = Histogram::paired(y, y_hat, bins, smoothing)?;
    Ok(jsd_from_probs(&p.probs, &q.probs))
}

/// Mean absolute error.
pub fn mae(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    if y.len() != y_hat.len() || y.is_empty() {
        return Err(Error::invalid("mae inputs must be nonempty and equal length".to_string()));
    }
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

/// RMSE divided by the range of the reference series.
pub fn nrmse(y_ref: &[f64], y_hat: &[f64]) -> Result<f64> {
    if y_ref.len() != y_hat.len() || y_ref.is_empty() {
        return Err(Error::invalid("nrmse inputs must be nonempty and equal length".to_string()));
    }
    let lo = y_ref.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = y_ref.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return Err(Error::invalid("nrmse reference series has zero range".to_string()));
    }
    let mse = y_ref.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y_ref.len() as f64;
    Ok(mse.sqrt() / (hi - lo))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;
    use rand::Rng;

    /// Brute-force directed KL for the regression constant below.
    fn kl_brute(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(&x, &y)| if x > 0.0 { x * (x / y).ln() } else { 0.0 }).sum()
    }

    #[test]
    fn two_bin_hand_computation() {
        let p = [0.5, 0.5];
        let q = [0.25, 0.75];
        let oracle = ((kl_brute(&p, &q) + kl_brute(&q, &p)) / 2.0).sqrt();
        let got = jsd_from_probs(&p, &q);
        assert!((got - oracle).abs() < 1e-15);
        // frozen regression constant
        assert!((got - 0.37057595184187775).abs() < 1e-12);
    }

    #[test]
    fn two_bin_from_raw_data() {
        // 2 of 4 values per bin vs 1 of 4 / 3 of 4
        let y = [0.1, 0.2, 0.8, 0.9];
        let y_hat = [0.15, 0.7, 0.8, 0.95];
        let got = jsd(&y, &y_hat, 2).unwrap();
        assert!((got - 0.37057595184187775).abs() < 1e-6);
    }

    #[test]
    fn jsd_zero_on_identical_and_symmetric() {
        let mut rng = seeds::stream(21, "metrics", 0);
        for _ in 0..100 {
            let n = rng.random_range(5..60);
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            assert_eq!(jsd(&a, &a, 20).unwrap(), 0.0);
            let ab = jsd(&a, &b, 20).unwrap();
            let ba = jsd(&b, &a, 20).unwrap();
            assert_eq!(ab, ba);
            assert!(ab >= 0.0);
        }
    }

    #[test]
    fn mixture_variant_is_bounded() {
        let a = vec![0.1; 40];
        let b = vec![0.9; 40];
        let v = jsd_mixture(&a, &b, 10).unwrap();
        assert!(v > 0.0 && v <= std::f64::consts::LN_2 + 1e-12);
        assert_eq!(jsd_mixture(&a, &a, 10).unwrap(), 0.0);
    }

    #[test]
    fn smoothing_shrinks_disjoint_divergence() {
        let a = vec![0.1; 40];
        let b = vec![0.9; 40];
        let mut prev = f64::INFINITY;
        for &s in &[1e-10, 1e-6, 1e-3, 1e-1] {
            let v = jsd_with_smoothing(&a, &b, 10, s).unwrap();
            assert!(v < prev, "smoothing {s} did not shrink divergence");
            prev = v;
        }
    }

    #[test]
    fn mae_cases() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae(&[0.0, 1.0], &[1.0, 1.0]).unwrap(), 0.5);
        let a = [0.3, 0.7, 0.1];
        let b = [0.5, 0.2, 0.9];
        assert_eq!(mae(&a, &b).unwrap(), mae(&b, &a).unwrap());
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn nrmse_cases() {
        assert_eq!(nrmse(&[0.0, 2.0], &[0.0, 2.0]).unwrap(), 0.0);
        assert!((nrmse(&[0.0, 2.0], &[1.0, 1.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(nrmse(&[1.0, 1.0], &[0.0, 2.0]).is_err());
    }

    #[test]
    fn nrmse_affine_invariance() {
        let mut rng = seeds::stream(21, "metrics", 1);
        let y: Vec<f64> = (0..30).map(|_| rng.random_range(0.0..1.0)).collect();
        let yh: Vec<f64> = (0..30).map(|_| rng.random_range(0.0..1.0)).collect();
        let base = nrmse(&y, &yh).unwrap();
        let (a, b) = (3.7, -1.2);
        let ty: Vec<f64> = y.iter().map(|v| a * v + b).collect();
        let tyh: Vec<f64> = yh.iter().map(|v| a * v + b).collect();
        let t = nrmse(&ty, &tyh).unwrap();
        assert!((base - t).abs() < 1e-12);
    }
}
