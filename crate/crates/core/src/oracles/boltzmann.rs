//! Quadrature reference for the Boltzmann policy `exp(r(a) / alpha) / Z` of a
//! one-dimensional bandit on `[-1, 1]`, and the histogram distance used to
//! compare a trained policy against it.

use crate::error::{Error, Result};

/// `Z(1)` for the default bandit: the mixture's mass on `[-1, 1]`, from the
/// normal CDF, `Phi(17) - Phi(-3)`.
pub const BANDIT_Z_ALPHA1: f64 = 0.9986501019683699;

const SUBDIVISIONS: usize = 64;

/// Composite trapezoid rule for `exp(r(a) / alpha)` with `points` nodes.
pub fn partition(reward: impl Fn(f64) -> f64, alpha: f64, lo: f64, hi: f64, points: usize) -> Result<f64> {
    if alpha <= 0.0 || points < 2 || hi <= lo {
        return Err(Error::Oracle(format!(
            "partition needs alpha > 0, points >= 2 and lo < hi (got {alpha}, {points}, [{lo}, {hi}])"
        )));
    }
    let h = (hi - lo) / (points - 1) as f64;
    let f = |i: usize| (reward(lo + i as f64 * h) / alpha).exp();
    let inner: f64 = (1..points - 1).map(f).sum();
    Ok(h * (inner + 0.5 * (f(0) + f(points - 1))))
}

/// Target probability of each of `bins` equal bins on `[-1, 1]`.
pub fn bin_masses(reward: impl Fn(f64) -> f64, alpha: f64, bins: usize) -> Result<Vec<f64>> {
    let width = 2.0 / bins as f64;
    let raw = (0..bins)
        .map(|b| {
            let lo = -1.0 + b as f64 * width;
            partition(&reward, alpha, lo, lo + width, SUBDIVISIONS + 1)
        })
        .collect::<Result<Vec<f64>>>()?;
    let z: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|m| m / z).collect())
}

/// Normalized histogram of samples on `[-1, 1]`; the endpoints fall in the
/// outer bins.
pub fn histogram(samples: &[f64], bins: usize) -> Vec<f64> {
    let mut counts = vec![0usize; bins];
    for &x in samples {
        let b = ((x + 1.0) / 2.0 * bins as f64).floor().clamp(0.0, (bins - 1) as f64) as usize;
        counts[b] += 1;
    }
    let n = samples.len().max(1) as f64;
    counts.into_iter().map(|c| c as f64 / n).collect()
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experience::Bandit;

    #[test]
    fn quadrature_matches_normal_cdf() {
        let bandit = Bandit::default();
        let z = partition(|a| bandit.reward(a), 1.0, -1.0, 1.0, 100_001).unwrap();
        assert!((z - BANDIT_Z_ALPHA1).abs() < 1e-9, "{z}");
    }

    #[test]
    fn masses_are_symmetric_and_normalized() {
        let bandit = Bandit::default();
        let m = bin_masses(|a| bandit.reward(a), 1.0, 200).unwrap();
        assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..100 {
            assert!((m[i] - m[199 - i]).abs() < 1e-12);
        }
        // each half holds one mode
        assert!((m[..100].iter().sum::<f64>() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn higher_temperature_is_flatter() {
        let bandit = Bandit::default();
        let cold = bin_masses(|a| bandit.reward(a), 0.5, 50).unwrap();
        let hot = bin_masses(|a| bandit.reward(a), 4.0, 50).unwrap();
        let peak = |m: &[f64]| m.iter().cloned().fold(0.0, f64::max);
        assert!(peak(&hot) < peak(&cold));
    }

    #[test]
    fn histogram_of_exact_quantiles_is_close() {
        let uniform: Vec<f64> = (0..10_000).map(|i| -1.0 + (i as f64 + 0.5) / 5000.0).collect();
        let h = histogram(&uniform, 20);
        assert!(total_variation(&h, &[0.05; 20]) < 1e-12);
        assert_eq!(histogram(&[1.0, -1.0], 4), vec![0.5, 0.0, 0.0, 0.5]);
    }

    #[test]
    fn bad_inputs_rejected() {
        assert!(partition(|_| 0.0, 0.0, -1.0, 1.0, 10).is_err());
        assert!(partition(|_| 0.0, 1.0, 1.0, -1.0, 10).is_err());
    }
}
