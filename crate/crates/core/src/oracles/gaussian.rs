//! Closed-form marginals of the discretized noising and denoising chains
//! when the score is affine in the action.

use std::f64::consts::{E, PI};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::CheckRow;
use crate::autodiff::{Graph, Var};
use crate::diffusion::{DiffusionPolicy, GaussianScore, NoiseSchedule, ScheduleConfig, ScoreModel};
use crate::error::Result;
use crate::nn::{Bound, Params};
use crate::tensor::Tensor;

/// Scalar diffusion coefficients `beta[n]` for `n = 1..=N` (index 0 unused).
#[derive(Debug, Clone, PartialEq)]
pub struct OuGrid {
    pub delta: f64,
    pub eta: f64,
    pub beta: Vec<f64>,
}

impl OuGrid {
    pub fn steps(&self) -> usize {
        self.beta.len() - 1
    }

    /// Cosine ramp `beta_min + (beta_max - beta_min) (1 - cos(pi n / N)) / 2`.
    pub fn cosine(steps: usize, horizon: f64, beta_min: f64, beta_max: f64, eta: f64) -> Self {
        let beta = (0..=steps)
            .map(|n| beta_min + (beta_max - beta_min) * 0.5 * (1.0 - (PI * n as f64 / steps as f64).cos()))
            .collect();
        Self {
            delta: horizon / steps as f64,
            eta,
            beta,
        }
    }

    pub fn constant(steps: usize, horizon: f64, beta: f64, eta: f64) -> Self {
        Self {
            delta: horizon / steps as f64,
            eta,
            beta: vec![beta; steps + 1],
        }
    }

    fn noise(&self, n: usize) -> f64 {
        2.0 * self.eta * self.eta * self.beta[n] * self.delta
    }
}

/// Per-step means and variances, indexed by diffusion step `0..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginals {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Noising chain `a^n = (1 - beta_n delta) a^{n-1} + eps` from `N(mu, sigma^2)`.
pub fn forward_marginals(grid: &OuGrid, mu: f64, sigma: f64) -> Marginals {
    let mut mean = vec![mu];
    let mut var = vec![sigma * sigma];
    for n in 1..=grid.steps() {
        let k = 1.0 - grid.beta[n] * grid.delta;
        mean.push(k * mean[n - 1]);
        var.push(k * k * var[n - 1] + grid.noise(n));
    }
    Marginals { mean, var }
}

/// Denoising chain from `N(0, eta^2)` with score `f_n(a) = slope[n] a + offset[n]`:
/// `a^{n-1} = a^n + (beta_n a^n + 2 eta^2 beta_n f_n(a^n)) delta + xi`.
pub fn backward_marginals(grid: &OuGrid, slope: &[f64], offset: &[f64]) -> Marginals {
    let steps = grid.steps();
    let mut mean = vec![0.0; steps + 1];
    let mut var = vec![0.0; steps + 1];
    var[steps] = grid.eta * grid.eta;
    for n in (1..=steps).rev() {
        let bd = grid.beta[n] * grid.delta;
        let c = 1.0 + bd + 2.0 * grid.eta * grid.eta * bd * slope[n];
        mean[n - 1] = c * mean[n] + 2.0 * grid.eta * grid.eta * bd * offset[n];
        var[n - 1] = c * c * var[n] + grid.noise(n);
    }
    Marginals { mean, var }
}

/// Both chains for a Gaussian target, with the denoiser using the exact
/// marginal scores `-(a - m_n) / v_n` of the noising chain.
pub fn analytic_gaussian_reversal(grid: &OuGrid, mu: f64, sigma: f64) -> (Marginals, Marginals) {
    let fwd = forward_marginals(grid, mu, sigma);
    let slope: Vec<f64> = fwd.var.iter().map(|v| -1.0 / v).collect();
    let offset: Vec<f64> = fwd.mean.iter().zip(&fwd.var).map(|(m, v)| m / v).collect();
    let bwd = backward_marginals(grid, &slope, &offset);
    (fwd, bwd)
}

pub fn gaussian_entropy(var: f64) -> f64 {
    0.5 * (2.0 * PI * E * var).ln()
}

/// Score model that is identically zero.
#[derive(Debug, Clone)]
pub struct ZeroScore {
    dim: usize,
    params: Params,
}

impl ZeroScore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            params: Params::new(),
        }
    }
}

impl ScoreModel for ZeroScore {
    fn act_dim(&self) -> usize {
        self.dim
    }

    fn params(&self) -> &Params {
        &self.params
    }

    fn score<'g>(&self, _bound: &Bound<'g>, _state: Var<'g>, action: Var<'g>, _n: usize) -> Result<Var<'g>> {
        Ok(action.graph().constant_owned(Tensor::zeros(&action.shape())))
    }
}

/// Sample statistics of one action dimension and of the bound estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainStats {
    pub mean: f64,
    pub var: f64,
    pub bound_mean: f64,
    pub bound_se: f64,
}

pub fn simulate<S: ScoreModel>(policy: &DiffusionPolicy<S>, paths: usize, seed: u64) -> Result<ChainStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chunk = 5_000;
    let (mut s1, mut s2, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0);
    let mut done = 0;
    while done < paths {
        let rows = chunk.min(paths - done);
        let graph = Graph::new();
        let bound = policy.bind(&graph, false);
        let t = policy.sample(&bound, graph.constant_owned(Tensor::zeros(&[rows, 1])), &mut rng)?;
        let a0 = t.actions[0].value();
        for r in 0..rows {
            let x = a0.get(r, 0);
            s1 += x;
            s2 += x * x;
        }
        for l in t.bound.value().data() {
            b1 += l;
            b2 += l * l;
        }
        done += rows;
    }
    let n = paths as f64;
    let mean = s1 / n;
    let bound_mean = b1 / n;
    Ok(ChainStats {
        mean,
        var: s2 / n - mean * mean,
        bound_mean,
        bound_se: ((b2 / n - bound_mean * bound_mean) / (n - 1.0)).sqrt(),
    })
}

fn schedule(steps: usize, eta: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::new(
        ScheduleConfig {
            eta,
            ..ScheduleConfig::new(steps)
        },
        1,
    )
}

/// Bound check for one target width: returns `(stats, entropy, sampled a^0 variance vs recursion)`.
pub fn bound_check(sigma: f64, steps: usize, paths: usize, seed: u64) -> Result<(ChainStats, f64, f64)> {
    let sched = schedule(steps, 1.0)?;
    let cfg = sched.config;
    let grid = OuGrid::cosine(steps, cfg.horizon, cfg.beta_min, cfg.beta_max, cfg.eta);
    let score = GaussianScore::for_target(&[sigma], &sched)?;
    let policy = DiffusionPolicy::new(score, sched, false)?;
    let stats = simulate(&policy, paths, seed)?;
    let (_, bwd) = analytic_gaussian_reversal(&grid, 0.0, sigma);
    Ok((stats, gaussian_entropy(sigma * sigma), bwd.var[0]))
}

pub fn suite() -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    for (i, sigma) in [0.5, 1.0, 2.0].into_iter().enumerate() {
        let (stats, entropy, analytic_var) = bound_check(sigma, 64, 100_000, 0x5EED_0002 + i as u64)?;
        rows.push(CheckRow::at_most(
            format!("bound/sigma={sigma}/mean_minus_entropy_minus_3se"),
            stats.bound_mean - entropy - 3.0 * stats.bound_se,
            0.0,
        ));
        rows.push(CheckRow::at_most(
            format!("bound/sigma={sigma}/abs_gap_to_entropy"),
            (stats.bound_mean - entropy).abs(),
            0.05,
        ));
        rows.push(CheckRow::at_most(
            format!("bound/sigma={sigma}/a0_variance_rel_err_vs_recursion"),
            (stats.var / analytic_var - 1.0).abs(),
            0.02,
        ));
    }

    // zero score, eta = 1: the chain is linear and its marginal is exact
    let sched = schedule(64, 1.0)?;
    let cfg = sched.config;
    let grid = OuGrid::cosine(64, cfg.horizon, cfg.beta_min, cfg.beta_max, cfg.eta);
    let policy = DiffusionPolicy::new(ZeroScore::new(1), sched, false)?;
    let stats = simulate(&policy, 100_000, 0x5EED_0003)?;
    let zeros = vec![0.0; 65];
    let expect = backward_marginals(&grid, &zeros, &zeros);
    rows.push(CheckRow::at_most(
        "bound/zero_score/mean_over_sd",
        stats.mean.abs() / expect.var[0].sqrt(),
        0.02,
    ));
    rows.push(CheckRow::at_most(
        "bound/zero_score/variance_rel_err",
        (stats.var / expect.var[0] - 1.0).abs(),
        0.02,
    ));

    // constant beta: stationary at the fixed point eta^2 / (1 - beta delta / 2)
    let grid = OuGrid::constant(1000, 1.0, 1.0, 1.3);
    let fixed = grid.eta.powi(2) / (1.0 - grid.beta[1] * grid.delta / 2.0);
    let fwd = forward_marginals(&grid, 0.0, fixed.sqrt());
    let drift = fwd.var.iter().map(|v| (v / fixed - 1.0).abs()).fold(0.0, f64::max);
    rows.push(CheckRow::at_most("bound/ou_fixed_point_drift", drift, 1e-12));
    rows.push(CheckRow::at_most(
        "bound/ou_fixed_point_vs_eta_sq",
        (fixed / grid.eta.powi(2) - 1.0).abs(),
        grid.beta[1] * grid.delta,
    ));
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn em_stationary_point() {
        let grid = OuGrid::constant(10, 1.0, 2.0, 0.7);
        let v: f64 = 0.49 / (1.0 - 0.1);
        let fwd = forward_marginals(&grid, 0.0, v.sqrt());
        assert!(fwd.var.iter().all(|x| (x - v).abs() < 1e-14));
    }

    #[test]
    fn exact_score_chain_approaches_target() {
        let grid = OuGrid::cosine(256, 1.0, 0.1, 10.0, 1.0);
        let (_, bwd) = analytic_gaussian_reversal(&grid, 0.3, 0.8);
        assert!((bwd.var[0] - 0.64).abs() < 0.02, "{}", bwd.var[0]);
        assert!((bwd.mean[0] - 0.3).abs() < 0.02, "{}", bwd.mean[0]);
    }

    #[test]
    fn zero_score_matches_linear_recursion() {
        let grid = OuGrid::cosine(2, 1.0, 1.0, 1.0, 1.0);
        let z = vec![0.0; 3];
        let m = backward_marginals(&grid, &z, &z);
        // two steps of a <- 1.5 a + N(0, 1)
        let expect = 1.5f64.powi(2) * (1.5f64.powi(2) * 1.0 + 1.0) + 1.0;
        assert!((m.var[0] - expect).abs() < 1e-12);
    }
}
