//! Summary statistics for evaluation returns.

use rand::Rng;

/// Mean after dropping `floor(n / 4)` values from each end of the sorted sample.
pub fn iqm(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "iqm of an empty sample");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let cut = sorted.len() / 4;
    let kept = &sorted[cut..sorted.len() - cut];
    kept.iter().sum::<f64>() / kept.len() as f64
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Percentile of a sorted sample with linear interpolation.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap interval of `statistic`, resampling within each
/// stratum independently. A single stratum is the ordinary bootstrap.
pub fn stratified_bootstrap<R: Rng + ?Sized>(
    strata: &[Vec<f64>],
    statistic: impl Fn(&[f64]) -> f64,
    resamples: usize,
    level: f64,
    rng: &mut R,
) -> (f64, f64) {
    let mut stats = Vec::with_capacity(resamples);
    let mut sample = Vec::new();
    for _ in 0..resamples {
        sample.clear();
        for stratum in strata {
            for _ in 0..stratum.len() {
                sample.push(stratum[rng.random_range(0..stratum.len())]);
            }
        }
        stats.push(statistic(&sample));
    }
    stats.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    (percentile(&stats, tail), percentile(&stats, 1.0 - tail))
}
