//! Naive forecasters used as acceptance yardsticks.

use crate::error::{Error, Result};
use crate::masking::MaskSpec;

fn suffix_split(mask: &MaskSpec) -> Result<usize> {
    // require an observed prefix followed by a predicted suffix
    let first = mask.mask.iter().position(|&m| m).ok_or_else(|| {
        Error::invalid("baselines need at least one predicted position".to_string())
    })?;
    if first == 0 || !mask.mask[first..].iter().all(|&m| m) {
        return Err(Error::invalid("baselines are defined for suffix masks only".to_string()));
    }
    Ok(first)
}

/// Repeat the last observed value across the prediction horizon.
pub fn copy_last(values: &[f64], mask: &MaskSpec) -> Result<Vec<f64>> {
    let split = suffix_split(mask)?;
    let mut out = values.to_vec();
    let last = values[split - 1];
    for v in out.iter_mut().skip(split) {
        *v = last;
    }
    Ok(out)
}

/// Repeat the mean of the observed prefix across the prediction horizon.
pub fn observed_mean(values: &[f64], mask: &MaskSpec) -> Result<Vec<f64>> {
    let split = suffix_split(mask)?;
    let mean = values[..split].iter().sum::<f64>() / split as f64;
    let mut out = values.to_vec();
    for v in out.iter_mut().skip(split) {
        *v = mean;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copy_last_repeats_boundary_value() {
        let m = MaskSpec::short_term(8, 2).unwrap();
        let v = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.9, 0.9];
        let out = copy_last(&v, &m).unwrap();
        assert_eq!(&out[6..], &[0.6, 0.6]);
        assert_eq!(&out[..6], &v[..6]);
    }

    #[test]
    fn observed_mean_uses_prefix_only() {
        let m = MaskSpec::long_term(8, 6).unwrap();
        let v = [0.2, 0.4, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let out = observed_mean(&v, &m).unwrap();
        assert!((out[2] - 0.3).abs() < 1e-15);
        assert!(out[2..].iter().all(|&x| (x - 0.3).abs() < 1e-15));
    }

    #[test]
    fn non_suffix_masks_rejected() {
        let m = MaskSpec { kind: crate::masking::MaskKind::Random, mask: vec![true, false, true, false] };
        assert!(copy_last(&[0.0; 4], &m).is_err());
    }
}
