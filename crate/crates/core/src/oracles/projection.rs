//! Quadratic-time categorical projection used as ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::CheckRow;
use crate::critic::{project, ValueSupport};
use crate::error::Result;

/// Every source mass is distributed over every bin by the triangle kernel
/// `max(0, 1 - |clip(y) - z_j| / width)`.
pub fn brute_force(bins: usize, v_min: f64, v_max: f64, values: &[f64], probs: &[f64]) -> Vec<f64> {
    let width = (v_max - v_min) / (bins - 1) as f64;
    let mut out = vec![0.0; bins];
    for (&y, &p) in values.iter().zip(probs) {
        let y = y.max(v_min).min(v_max);
        for (j, slot) in out.iter_mut().enumerate() {
            let z = v_min + j as f64 * width;
            let w = 1.0 - (y - z).abs() / width;
            if w > 0.0 {
                *slot += p * w;
            }
        }
    }
    out
}

/// Random instance: support, shifted atoms and a probability vector.
pub struct Instance {
    pub support: ValueSupport,
    pub values: Vec<f64>,
    pub probs: Vec<f64>,
}

pub fn random_instance<R: Rng + ?Sized>(rng: &mut R) -> Instance {
    let bins = rng.random_range(2..=101);
    let v_min = rng.random_range(-100.0..10.0);
    let v_max = v_min + rng.random_range(0.5..200.0);
    let support = ValueSupport::new(bins, v_min, v_max).expect("valid range");
    let reward = rng.random_range(-0.3..0.3) * (v_max - v_min);
    let gamma = if rng.random_bool(0.1) { 0.0 } else { rng.random_range(0.0..0.999) };
    let values = support.atoms().iter().map(|z| reward + gamma * z).collect();
    let raw: Vec<f64> = (0..bins).map(|_| rng.random::<f64>().powi(3)).collect();
    let total: f64 = raw.iter().sum::<f64>().max(f64::MIN_POSITIVE);
    let probs = raw.iter().map(|v| v / total).collect();
    Instance { support, values, probs }
}

pub fn suite(instances: usize) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_0001);
    let (mut worst_diff, mut worst_mass, mut negative) = (0.0f64, 0.0f64, 0.0f64);
    let mut inside_mean = 0.0f64;
    for _ in 0..instances {
        let inst = random_instance(&mut rng);
        let s = inst.support;
        let mut fast = vec![0.0; s.bins];
        project(&s, &inst.values, &inst.probs, &mut fast);
        let slow = brute_force(s.bins, s.v_min, s.v_max, &inst.values, &inst.probs);
        for (a, b) in fast.iter().zip(&slow) {
            worst_diff = worst_diff.max((a - b).abs());
            negative = negative.min(*a);
        }
        let total: f64 = inst.probs.iter().sum();
        worst_mass = worst_mass.max((fast.iter().sum::<f64>() - total).abs());
        // when nothing is clipped the projection also keeps the mean
        if inst.values.iter().all(|v| *v >= s.v_min && *v <= s.v_max) {
            let before: f64 = inst.values.iter().zip(&inst.probs).map(|(v, p)| v * p).sum();
            let after: f64 = fast.iter().enumerate().map(|(j, p)| p * s.atom(j)).sum();
            inside_mean = inside_mean.max((before - after).abs() / (s.v_max - s.v_min));
        }
    }
    Ok(vec![
        CheckRow::at_most(format!("projection/max_abs_diff_vs_brute_force[{instances}]"), worst_diff, 1e-12),
        CheckRow::at_most("projection/mass_conservation", worst_mass, 1e-9),
        CheckRow::at_least("projection/min_probability", negative, 0.0),
        CheckRow::at_most("projection/relative_mean_shift_unclipped", inside_mean, 1e-9),
    ])
}
