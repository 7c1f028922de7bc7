//! Task masks and masked mixing/loss.
//!
//! Convention throughout the crate: mask = 1 marks a position the model must
//! predict (it carries the noisy token and receives loss); mask = 0 marks an
//! observed position that keeps its clean token.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskKind {
    ShortTerm,
    LongTerm,
    Generation,
    Random,
}

impl MaskKind {
    pub fn all() -> [MaskKind; 4] {
        [MaskKind::ShortTerm, MaskKind::LongTerm, MaskKind::Generation, MaskKind::Random]
    }

    pub fn name(self) -> &'static str {
        match self {
            MaskKind::ShortTerm => "short",
            MaskKind::LongTerm => "long",
            MaskKind::Generation => "generation",
            MaskKind::Random => "random",
        }
    }

    pub fn from_name(s: &str) -> Result<MaskKind> {
        match s {
            "short" => Ok(MaskKind::ShortTerm),
            "long" => Ok(MaskKind::LongTerm),
            "generation" => Ok(MaskKind::Generation),
            "random" => Ok(MaskKind::Random),
            _ => Err(Error::invalid(format!(
                "unknown task '{s}' (expected short|long|generation|random)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSpec {
    pub kind: MaskKind,
    pub mask: Vec<bool>,
}

impl MaskSpec {
    /// Contiguous suffix of `h` predicted positions with `h <= L/4`.
    pub fn short_term(l: usize, h: usize) -> Result<MaskSpec> {
        if h < 1 || h > l / 4 {
            return Err(Error::invalid(format!(
                "short-term horizon {h} outside 1..={} for L={l}",
                l / 4
            )));
        }
        Ok(MaskSpec { kind: MaskKind::ShortTerm, mask: suffix_mask(l, h) })
    }

    /// Contiguous suffix of `h` predicted positions with `h >= ceil(3L/4)`.
    pub fn long_term(l: usize, h: usize) -> Result<MaskSpec> {
        let lo = (3 * l).div_ceil(4);
        if h < lo || h > l - 1 {
            return Err(Error::invalid(format!(
                "long-term horizon {h} outside {lo}..={} for L={l}",
                l - 1
            )));
        }
        Ok(MaskSpec { kind: MaskKind::LongTerm, mask: suffix_mask(l, h) })
    }

    /// Everything is predicted.
    pub fn generation(l: usize) -> MaskSpec {
        MaskSpec { kind: MaskKind::Generation, mask: vec![true; l] }
    }

    /// `round(ratio * L)` positions drawn without replacement.
    pub fn random(l: usize, ratio: f64, rng: &mut impl Rng) -> Result<MaskSpec> {
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(Error::invalid(format!("random mask ratio {ratio} outside (0, 1)")));
        }
        let count = ((ratio * l as f64).round() as usize).clamp(1, l - 1);
        let mut idx: Vec<usize> = (0..l).collect();
        idx.shuffle(rng);
        let mut mask = vec![false; l];
        for &i in idx.iter().take(count) {
            mask[i] = true;
        }
        Ok(MaskSpec { kind: MaskKind::Random, mask })
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn predicted_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

fn suffix_mask(l: usize, h: usize) -> Vec<bool> {
    let mut m = vec![false; l];
    for slot in m.iter_mut().skip(l - h) {
        *slot = true;
    }
    m
}

/// Build a mask of the given kind. For the prediction kinds
/// `horizon_or_ratio` is the integral horizon; for Random it is the masked
/// fraction; Generation ignores it.
pub fn make_mask(kind: MaskKind, l: usize, horizon_or_ratio: f64, rng: &mut impl Rng) -> Result<MaskSpec> {
    match kind {
        MaskKind::ShortTerm | MaskKind::LongTerm => {
            if horizon_or_ratio.fract() != 0.0 || horizon_or_ratio < 0.0 {
                return Err(Error::invalid(format!(
                    "prediction horizon must be a nonnegative integer, got {horizon_or_ratio}"
                )));
            }
            let h = horizon_or_ratio as usize;
            if kind == MaskKind::ShortTerm {
                MaskSpec::short_term(l, h)
            } else {
                MaskSpec::long_term(l, h)
            }
        }
        MaskKind::Generation => Ok(MaskSpec::generation(l)),
        MaskKind::Random => MaskSpec::random(l, horizon_or_ratio, rng),
    }
}

/// Draw a mask kind according to `weights` (ordered as `MaskKind::all()`).
pub fn sample_mask_kind(weights: &[f64; 4], rng: &mut impl Rng) -> MaskKind {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random_range(0.0..total);
    for (kind, &w) in MaskKind::all().into_iter().zip(weights) {
        if u < w {
            return kind;
        }
        u -= w;
    }
    MaskKind::Random
}

/// Mix noisy and clean tokens: the output carries `xk` at predicted
/// positions and `x0` at observed ones. Mask broadcasts over batch and
/// channels.
pub fn apply_mask(x0: &Tensor, xk: &Tensor, m: &MaskSpec) -> Result<Tensor> {
    if x0.shape() != xk.shape() {
        return Err(Error::shape(format!("x0 {:?} vs xk {:?}", x0.shape(), xk.shape())));
    }
    if x0.rank() != 3 || x0.dim(1) != m.len() {
        return Err(Error::shape(format!(
            "mask len {} does not match sequence dim of {:?}",
            m.len(),
            x0.shape()
        )));
    }
    let (b, l, c) = (x0.dim(0), x0.dim(1), x0.dim(2));
    let mut out = x0.clone();
    for bi in 0..b {
        for (t, &masked) in m.mask.iter().enumerate().take(l) {
            if masked {
                let s = (bi * l + t) * c;
                out.data_mut()[s..s + c].copy_from_slice(&xk.data()[s..s + c]);
            }
        }
    }
    Ok(out)
}

/// Mean squared error between noise tensors over predicted positions only
/// (mean over batch x masked positions x channels).
pub fn masked_loss(eps: &Tensor, eps_hat: &Tensor, m: &MaskSpec) -> Result<f64> {
    if eps.shape() != eps_hat.shape() {
        return Err(Error::shape(format!("eps {:?} vs eps_hat {:?}", eps.shape(), eps_hat.shape())));
    }
    if eps.rank() != 3 || eps.dim(1) != m.len() {
        return Err(Error::shape("mask length does not match sequence dim".to_string()));
    }
    let cnt = m.predicted_count();
    if cnt == 0 {
        return Err(Error::contract("mask has no predicted positions".to_string()));
    }
    let (b, l, c) = (eps.dim(0), eps.dim(1), eps.dim(2));
    let mut s = 0.0;
    for bi in 0..b {
        for (t, &masked) in m.mask.iter().enumerate().take(l) {
            if !masked {
                continue;
            }
            for ci in 0..c {
                let d = eps.at3(bi, t, ci) - eps_hat.at3(bi, t, ci);
                s += d * d;
            }
        }
    }
    Ok(s / (b * cnt * c) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;

    #[test]
    fn short_term_suffix_layout() {
        let m = MaskSpec::short_term(64, 8).unwrap();
        assert!(m.mask[..56].iter().all(|&x| !x));
        assert!(m.mask[56..].iter().all(|&x| x));
    }

    #[test]
    fn generation_is_all_ones() {
        let m = MaskSpec::generation(64);
        assert_eq!(m.predicted_count(), 64);
    }

    #[test]
    fn random_mask_counts() {
        let mut rng = seeds::stream(4, "mask", 0);
        let m = MaskSpec::random(64, 0.25, &mut rng).unwrap();
        assert_eq!(m.predicted_count(), 16);
    }

    #[test]
    fn horizon_bands_are_enforced() {
        assert!(MaskSpec::short_term(64, 0).is_err());
        assert!(MaskSpec::short_term(64, 17).is_err());
        assert!(MaskSpec::short_term(64, 16).is_ok());
        assert!(MaskSpec::long_term(64, 47).is_err());
        assert!(MaskSpec::long_term(64, 48).is_ok());
        assert!(MaskSpec::long_term(64, 64).is_err());
        let mut rng = seeds::stream(4, "mask", 1);
        assert!(MaskSpec::random(64, 0.0, &mut rng).is_err());
        assert!(MaskSpec::random(64, 1.0, &mut rng).is_err());
    }

    #[test]
    fn apply_mask_elementwise() {
        let x0 = Tensor::new(vec![1, 2, 1], vec![10.0, 20.0]);
        let xk = Tensor::new(vec![1, 2, 1], vec![30.0, 40.0]);
        let m = MaskSpec { kind: MaskKind::Random, mask: vec![false, true] };
        let out = apply_mask(&x0, &xk, &m).unwrap();
        assert_eq!(out.data(), &[10.0, 40.0]);

        let all = MaskSpec::generation(2);
        assert_eq!(apply_mask(&x0, &xk, &all).unwrap(), xk);
        let none = MaskSpec { kind: MaskKind::Random, mask: vec![false, false] };
        assert_eq!(apply_mask(&x0, &xk, &none).unwrap(), x0);
    }

    #[test]
    fn apply_mask_is_idempotent() {
        let mut rng = seeds::stream(4, "mask", 2);
        let x0 = Tensor::randn(&[2, 8, 3], &mut rng);
        let xk = Tensor::randn(&[2, 8, 3], &mut rng);
        let m = MaskSpec::random(8, 0.5, &mut rng).unwrap();
        let once = apply_mask(&x0, &xk, &m).unwrap();
        let twice = apply_mask(&x0, &once, &m).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn masked_loss_hand_case() {
        // per-position squared errors [9, 4] with mask [0, 1] -> 4
        let eps = Tensor::new(vec![1, 2, 1], vec![3.0, 2.0]);
        let eps_hat = Tensor::new(vec![1, 2, 1], vec![0.0, 0.0]);
        let m = MaskSpec { kind: MaskKind::Random, mask: vec![false, true] };
        assert_eq!(masked_loss(&eps, &eps_hat, &m).unwrap(), 4.0);
    }

    #[test]
    fn masked_loss_ignores_unmasked_values() {
        let mut rng = seeds::stream(4, "mask", 3);
        let eps = Tensor::randn(&[2, 8, 3], &mut rng);
        let eps_hat = Tensor::randn(&[2, 8, 3], &mut rng);
        let m = MaskSpec::random(8, 0.5, &mut rng).unwrap();
        let l1 = masked_loss(&eps, &eps_hat, &m).unwrap();
        let mut tampered = eps_hat.clone();
        for t in 0..8 {
            if !m.mask[t] {
                for bi in 0..2 {
                    for ci in 0..3 {
                        let idx = tampered.idx3(bi, t, ci);
                        tampered.data_mut()[idx] = 1e6;
                    }
                }
            }
        }
        let l2 = masked_loss(&eps, &tampered, &m).unwrap();
        assert_eq!(l1, l2);
    }

    #[test]
    fn perfect_prediction_is_zero() {
        let mut rng = seeds::stream(4, "mask", 4);
        let eps = Tensor::randn(&[2, 8, 3], &mut rng);
        let m = MaskSpec::generation(8);
        assert_eq!(masked_loss(&eps, &eps, &m).unwrap(), 0.0);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let eps = Tensor::zeros(&[1, 4, 1]);
        let m = MaskSpec { kind: MaskKind::Random, mask: vec![false; 4] };
        assert!(masked_loss(&eps, &eps, &m).is_err());
    }

    #[test]
    fn kind_sampling_is_roughly_uniform() {
        let mut rng = seeds::stream(4, "mask", 5);
        let weights = [0.25; 4];
        let mut counts = [0usize; 4];
        let n = 10_000;
        for _ in 0..n {
            let k = sample_mask_kind(&weights, &mut rng);
            counts[MaskKind::all().iter().position(|&x| x == k).unwrap()] += 1;
        }
        for &c in &counts {
            let f = c as f64 / n as f64;
            assert!((f - 0.25).abs() <= 0.02, "kind frequency {f}");
        }
    }
}
