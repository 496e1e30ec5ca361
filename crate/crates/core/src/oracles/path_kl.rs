//! Exact path-space KL divergences on a 1-D action grid by enumeration.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gaussian::OuGrid;
use super::CheckRow;
use crate::error::{Error, Result};

pub const MAX_STEPS: usize = 3;
pub const MAX_POINTS: usize = 21;

/// Row-stochastic matrix `kernel[from][to]`.
pub type Kernel = Vec<Vec<f64>>;

/// A target density and a score table on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridProblem {
    pub points: Vec<f64>,
    /// Unnormalized log-density of the target at each point.
    pub target_log_density: Vec<f64>,
    /// `score[n][g]` for `n = 1..=N` (row 0 unused).
    pub score: Vec<Vec<f64>>,
    pub schedule: OuGrid,
}

/// Both joint laws over paths `(a^0, ..., a^N)` as discrete kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteChains {
    pub target: Vec<f64>,
    /// `forward[n - 1][a^{n-1}][a^n]`.
    pub forward: Vec<Kernel>,
    pub prior: Vec<f64>,
    /// `backward[n - 1][a^n][a^{n-1}]`.
    pub backward: Vec<Kernel>,
}

fn normalize(v: &mut [f64]) {
    let total: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= total);
}

/// Midpoint mass of `N(mean, var)` on each grid point, renormalized.
fn discretize(points: &[f64], mean: f64, var: f64) -> Vec<f64> {
    let mut w: Vec<f64> = points
        .iter()
        .map(|x| (-(x - mean).powi(2) / (2.0 * var)).exp() / (2.0 * PI * var).sqrt())
        .collect();
    if w.iter().sum::<f64>() <= 0.0 {
        // all mass fell off the grid: put it on the nearest point
        let nearest = points
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - mean).abs().total_cmp(&(b.1 - mean).abs()))
            .map(|(i, _)| i)
            .unwrap();
        w[nearest] = 1.0;
    }
    normalize(&mut w);
    w
}

impl GridProblem {
    pub fn steps(&self) -> usize {
        self.schedule.steps()
    }

    pub fn check(&self) -> Result<()> {
        if self.steps() > MAX_STEPS || self.points.len() > MAX_POINTS {
            return Err(Error::Oracle(format!(
                "path enumeration limited to N <= {MAX_STEPS} and {MAX_POINTS} grid points, got N = {} and {} points",
                self.steps(),
                self.points.len()
            )));
        }
        Ok(())
    }

    pub fn chains(&self) -> Result<DiscreteChains> {
        self.check()?;
        let g = &self.schedule;
        let eta2 = g.eta * g.eta;
        let mut target: Vec<f64> = self.target_log_density.iter().map(|l| l.exp()).collect();
        normalize(&mut target);
        let mut forward = Vec::new();
        let mut backward = Vec::new();
        for n in 1..=self.steps() {
            let var = 2.0 * eta2 * g.beta[n] * g.delta;
            let shrink = 1.0 - g.beta[n] * g.delta;
            forward.push(self.points.iter().map(|a| discretize(&self.points, shrink * a, var)).collect());
            backward.push(
                self.points
                    .iter()
                    .zip(&self.score[n])
                    .map(|(a, f)| discretize(&self.points, a + (g.beta[n] * a + 2.0 * eta2 * g.beta[n] * f) * g.delta, var))
                    .collect(),
            );
        }
        Ok(DiscreteChains {
            target,
            forward,
            prior: discretize(&self.points, 0.0, eta2),
            backward,
        })
    }
}

impl DiscreteChains {
    pub fn steps(&self) -> usize {
        self.forward.len()
    }

    /// Marginal of `a^n` under the target (noising) chain.
    pub fn target_marginal(&self, n: usize) -> Vec<f64> {
        let mut p = self.target.clone();
        for kernel in &self.forward[..n] {
            p = (0..p.len()).map(|j| p.iter().zip(kernel).map(|(pi, row)| pi * row[j]).sum()).collect();
        }
        p
    }

    /// Marginal of `a^0` under the denoising chain.
    pub fn policy_marginal(&self) -> Vec<f64> {
        let mut q = self.prior.clone();
        for kernel in self.backward.iter().rev() {
            q = (0..q.len()).map(|j| q.iter().zip(kernel).map(|(qi, row)| qi * row[j]).sum()).collect();
        }
        q
    }

    /// Replaces the denoiser by the Bayes reversal of the noising chain.
    pub fn exact_reversal(mut self) -> Self {
        let steps = self.steps();
        let marginals: Vec<Vec<f64>> = (0..=steps).map(|n| self.target_marginal(n)).collect();
        self.prior = marginals[steps].clone();
        for n in 1..=steps {
            let (prev, next, fwd) = (&marginals[n - 1], &marginals[n], &self.forward[n - 1]);
            self.backward[n - 1] = (0..next.len())
                .map(|to| {
                    (0..prev.len())
                        .map(|from| if next[to] > 0.0 { prev[from] * fwd[from][to] / next[to] } else { 0.0 })
                        .collect()
                })
                .collect();
        }
        self
    }

    /// `log q(path) - log p(path)` for the denoising law `q` and noising law `p`.
    fn log_ratio(&self, path: &[usize]) -> f64 {
        let steps = self.steps();
        let mut lq = self.prior[path[steps]].ln();
        let mut lp = self.target[path[0]].ln();
        for n in 1..=steps {
            lq += self.backward[n - 1][path[n]][path[n - 1]].ln();
            lp += self.forward[n - 1][path[n - 1]][path[n]].ln();
        }
        lq - lp
    }

    fn path_prob(&self, path: &[usize]) -> f64 {
        let steps = self.steps();
        let mut q = self.prior[path[steps]];
        for n in 1..=steps {
            q *= self.backward[n - 1][path[n]][path[n - 1]];
        }
        q
    }
}

/// `(KL(q_{0:N} || p_{0:N}), KL(q_0 || p_0))` summed over every path.
pub fn brute_force_path_kl(problem: &GridProblem) -> Result<(f64, f64)> {
    let chains = problem.chains()?;
    Ok(enumerate_kl(&chains))
}

pub fn enumerate_kl(chains: &DiscreteChains) -> (f64, f64) {
    let g = chains.prior.len();
    let len = chains.steps() + 1;
    let mut path = vec![0usize; len];
    let mut joint = 0.0;
    loop {
        let q = chains.path_prob(&path);
        if q > 0.0 {
            joint += q * chains.log_ratio(&path);
        }
        // odometer increment
        let mut i = 0;
        while i < len {
            path[i] += 1;
            if path[i] < g {
                break;
            }
            path[i] = 0;
            i += 1;
        }
        if i == len {
            break;
        }
    }
    let q0 = chains.policy_marginal();
    let marginal = q0
        .iter()
        .zip(&chains.target)
        .filter(|(q, _)| **q > 0.0)
        .map(|(q, p)| q * (q / p).ln())
        .sum();
    (joint, marginal)
}

fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

/// Monte-Carlo mean and standard error of the path log-ratio under the denoiser.
pub fn monte_carlo_kl<R: Rng + ?Sized>(chains: &DiscreteChains, paths: usize, rng: &mut R) -> (f64, f64) {
    let steps = chains.steps();
    let mut path = vec![0usize; steps + 1];
    let (mut s1, mut s2) = (0.0, 0.0);
    for _ in 0..paths {
        path[steps] = sample_index(&chains.prior, rng);
        for n in (1..=steps).rev() {
            path[n - 1] = sample_index(&chains.backward[n - 1][path[n]], rng);
        }
        let l = chains.log_ratio(&path);
        s1 += l;
        s2 += l * l;
    }
    let n = paths as f64;
    let mean = s1 / n;
    (mean, ((s2 / n - mean * mean) / (n - 1.0)).sqrt())
}

/// Random bimodal target, schedule and perturbed score table.
pub fn random_problem<R: Rng + ?Sized>(rng: &mut R) -> GridProblem {
    let steps = rng.random_range(1..=MAX_STEPS);
    let points_n = 2 * rng.random_range(5..=10) + 1;
    let sigma = rng.random_range(0.2..0.6);
    let mode = rng.random_range(0.0..0.8);
    let half = mode + 3.0 * sigma;
    let spacing = 2.0 * half / (points_n - 1) as f64;
    let points: Vec<f64> = (0..points_n).map(|i| -half + i as f64 * spacing).collect();
    let weight = rng.random_range(0.2..0.8);
    let target_log_density = points
        .iter()
        .map(|x: &f64| {
            let c = |m: f64| (-(x - m).powi(2) / (2.0 * sigma * sigma)).exp();
            (weight * c(-mode) + (1.0 - weight) * c(mode)).ln()
        })
        .collect();
    let eta = rng.random_range(0.5..1.5);
    let schedule = OuGrid::cosine(steps, 1.0, 0.1, rng.random_range(0.5..3.0), eta);
    let score = (0..=steps)
        .map(|_| points.iter().map(|a| -a / (eta * eta) + rng.random_range(-0.5..0.5)).collect())
        .collect();
    GridProblem {
        points,
        target_log_density,
        score,
        schedule,
    }
}

pub fn suite(instances: usize) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_0005);
    let (mut slack, mut reversal, mut worst_z) = (f64::INFINITY, 0.0f64, 0.0f64);
    for _ in 0..instances {
        let problem = random_problem(&mut rng);
        let chains = problem.chains()?;
        let (joint, marginal) = enumerate_kl(&chains);
        slack = slack.min(joint - marginal);
        let (mc, se) = monte_carlo_kl(&chains, 1_000_000, &mut rng);
        worst_z = worst_z.max((mc - joint).abs() / se.max(f64::MIN_POSITIVE));
        let (exact, _) = enumerate_kl(&chains.exact_reversal());
        reversal = reversal.max(exact.abs());
    }
    Ok(vec![
        CheckRow::at_least(format!("kl/min_joint_minus_marginal[{instances}]"), slack, -1e-9),
        CheckRow::at_most("kl/exact_reversal_joint_kl", reversal, 1e-8),
        CheckRow::at_most("kl/monte_carlo_max_abs_z", worst_z, 3.0),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_reversal_has_zero_kl() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let chains = random_problem(&mut rng).chains().unwrap().exact_reversal();
        let (joint, marginal) = enumerate_kl(&chains);
        assert!(joint.abs() < 1e-10 && marginal.abs() < 1e-10, "{joint} {marginal}");
    }

    #[test]
    fn data_processing_inequality() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let (joint, marginal) = brute_force_path_kl(&random_problem(&mut rng)).unwrap();
            assert!(joint >= marginal - 1e-12 && marginal >= -1e-12);
        }
    }

    #[test]
    fn enumeration_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = random_problem(&mut rng);
        p.schedule = OuGrid::cosine(4, 1.0, 0.1, 1.0, 1.0);
        p.score = vec![vec![0.0; p.points.len()]; 5];
        assert!(matches!(brute_force_path_kl(&p), Err(Error::Oracle(_))));
    }

    #[test]
    fn kernels_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let chains = random_problem(&mut rng).chains().unwrap();
        for k in chains.forward.iter().chain(&chains.backward) {
            for row in k {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
