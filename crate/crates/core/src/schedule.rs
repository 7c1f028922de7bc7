//! Diffusion noise schedule, forward perturbation, and the reverse update.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-step noise weights for a K-step diffusion.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn k(&self) -> usize {
        self.beta.len()
    }
}

/// Linear beta schedule with running-product alpha_bar.
pub fn build_schedule(k: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if k < 2 {
        return Err(Error::invalid("schedule needs at least 2 steps".to_string()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let mut beta = Vec::with_capacity(k);
    let mut alpha = Vec::with_capacity(k);
    let mut alpha_bar = Vec::with_capacity(k);
    let mut prod = 1.0;
    for i in 0..k {
        let b = beta_start + (beta_end - beta_start) * i as f64 / (k - 1) as f64;
        beta.push(b);
        alpha.push(1.0 - b);
        prod *= 1.0 - b;
        alpha_bar.push(prod);
    }
    Ok(NoiseSchedule { beta, alpha, alpha_bar })
}

/// Variance-preserving forward perturbation
/// `x_k = sqrt(alpha_bar_k) * x0 + sqrt(1 - alpha_bar_k) * eps`.
pub fn forward_perturb(x0: &Tensor, k: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    if k >= sched.k() {
        return Err(Error::invalid(format!("step {k} out of range 0..{}", sched.k())));
    }
    if x0.shape() != eps.shape() {
        return Err(Error::shape(format!("x0 {:?} vs eps {:?}", x0.shape(), eps.shape())));
    }
    let ab = sched.alpha_bar[k];
    let (ca, cb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0.data().iter().zip(eps.data()).map(|(&x, &e)| ca * x + cb * e).collect();
    Ok(Tensor::new(x0.shape().to_vec(), data))
}

/// One ancestral reverse update:
/// `x_{k-1} = (x_k - (1-alpha_k)/sqrt(1-alpha_bar_k) * eps_hat) / sqrt(alpha_k)
///            + sqrt(beta_k) * z`, with `z = 0` required at `k = 0`.
pub fn reverse_step(
    xk: &Tensor,
    eps_hat: &Tensor,
    k: usize,
    z: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if k >= sched.k() {
        return Err(Error::invalid(format!("step {k} out of range 0..{}", sched.k())));
    }
    if xk.shape() != eps_hat.shape() || xk.shape() != z.shape() {
        return Err(Error::shape("reverse_step operand shapes differ".to_string()));
    }
    if k == 0 && z.data().iter().any(|&v| v != 0.0) {
        return Err(Error::contract("stochastic term must be zero at the final step".to_string()));
    }
    let a = sched.alpha[k];
    let ab = sched.alpha_bar[k];
    let coeff = (1.0 - a) / (1.0 - ab).sqrt();
    let inv_sqrt_a = 1.0 / a.sqrt();
    let sigma = sched.beta[k].sqrt();
    let data = xk
        .data()
        .iter()
        .zip(eps_hat.data())
        .zip(z.data())
        .map(|((&x, &e), &zz)| inv_sqrt_a * (x - coeff * e) + sigma * zz)
        .collect();
    Ok(Tensor::new(xk.shape().to_vec(), data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;

    #[test]
    fn hand_product_k2() {
        let s = build_schedule(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bar[0] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar[1] - 0.72).abs() < 1e-15);
    }

    #[test]
    fn default_schedule_is_monotone() {
        let s = build_schedule(50, 1e-4, 0.05).unwrap();
        for k in 1..50 {
            assert!(s.alpha_bar[k] < s.alpha_bar[k - 1]);
            assert!(s.beta[k] > 0.0 && s.beta[k] < 1.0);
            assert!(s.alpha_bar[k] > 0.0 && s.alpha_bar[k] < 1.0);
        }
        assert_eq!(s.alpha_bar[0], s.alpha[0]);
    }

    #[test]
    fn constant_schedule_powers() {
        let b = 0.03;
        let s = build_schedule(10, b, b).unwrap();
        for k in 0..10 {
            let want = (1.0 - b).powi(k as i32 + 1);
            assert!((s.alpha_bar[k] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_bounds() {
        assert!(build_schedule(1, 0.1, 0.2).is_err());
        assert!(build_schedule(10, 0.0, 0.2).is_err());
        assert!(build_schedule(10, 0.3, 0.2).is_err());
        assert!(build_schedule(10, 0.3, 1.0).is_err());
    }

    #[test]
    fn forward_plug_in() {
        // alpha_bar = 0.64 -> 0.8 * x0 + 0.6 * eps
        let s = NoiseSchedule { beta: vec![0.36], alpha: vec![0.64], alpha_bar: vec![0.64] };
        let x0 = Tensor::scalar(1.0);
        let eps = Tensor::scalar(0.5);
        let out = forward_perturb(&x0, 0, &eps, &s).unwrap();
        assert!((out.item() - 1.1).abs() < 1e-15);
    }

    #[test]
    fn forward_no_noise_limit() {
        // alpha_bar == 1 leaves x0 untouched
        let s = NoiseSchedule { beta: vec![0.0], alpha: vec![1.0], alpha_bar: vec![1.0] };
        let x0 = Tensor::new(vec![3], vec![0.1, -0.4, 2.0]);
        let eps = Tensor::new(vec![3], vec![5.0, 5.0, 5.0]);
        assert_eq!(forward_perturb(&x0, 0, &eps, &s).unwrap(), x0);
    }

    #[test]
    fn forward_monte_carlo_stats() {
        let s = build_schedule(50, 1e-4, 0.05).unwrap();
        let k = 49;
        let n = 10_000;
        let mut rng = seeds::stream(123, "sched.mc", 0);
        let x0 = Tensor::zeros(&[n]);
        let eps = Tensor::randn(&[n], &mut rng);
        let out = forward_perturb(&x0, k, &eps, &s).unwrap();
        let mean: f64 = out.data().iter().sum::<f64>() / n as f64;
        let var: f64 = out.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let want = 1.0 - s.alpha_bar[k];
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - want).abs() < 0.05 * want, "var {var} vs {want}");
    }

    #[test]
    fn reverse_is_identity_in_alpha_one_limit() {
        let s = NoiseSchedule { beta: vec![0.0, 0.0], alpha: vec![1.0, 1.0], alpha_bar: vec![1.0, 0.5] };
        let xk = Tensor::new(vec![2], vec![0.3, -0.7]);
        let eh = Tensor::new(vec![2], vec![1.0, 1.0]);
        let z = Tensor::zeros(&[2]);
        let out = reverse_step(&xk, &eh, 1, &z, &s).unwrap();
        assert_eq!(out, xk);
    }

    #[test]
    fn reverse_rejects_noise_at_final_step() {
        let s = build_schedule(10, 1e-3, 0.02).unwrap();
        let x = Tensor::zeros(&[2]);
        let z = Tensor::new(vec![2], vec![0.0, 0.1]);
        assert!(reverse_step(&x, &x, 0, &z, &s).is_err());
        let z0 = Tensor::zeros(&[2]);
        assert!(reverse_step(&x, &x, 0, &z0, &s).is_ok());
    }

    /// Deterministic round-trip: feeding the true noise of the current state
    /// (the quantity a perfect denoiser predicts) reverses the forward
    /// process exactly, up to float rounding.
    #[test]
    fn reverse_roundtrip_recovers_x0() {
        for &k_steps in &[10usize, 50] {
            let s = build_schedule(k_steps, 1e-4, 0.05).unwrap();
            let mut rng = seeds::stream(7, "sched.roundtrip", k_steps as u64);
            let x0 = Tensor::randn(&[32], &mut rng);
            let eps = Tensor::randn(&[32], &mut rng);
            let mut state = forward_perturb(&x0, k_steps - 1, &eps, &s).unwrap();
            let z = Tensor::zeros(&[32]);
            for k in (0..k_steps).rev() {
                let ab = s.alpha_bar[k];
                let true_eps = Tensor::new(
                    vec![32],
                    state
                        .data()
                        .iter()
                        .zip(x0.data())
                        .map(|(&xs, &x)| (xs - ab.sqrt() * x) / (1.0 - ab).sqrt())
                        .collect(),
                );
                state = reverse_step(&state, &true_eps, k, &z, &s).unwrap();
            }
            let err = state
                .data()
                .iter()
                .zip(x0.data())
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err <= 1e-4, "K={k_steps}: roundtrip error {err}");
        }
    }
}
