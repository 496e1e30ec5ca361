//! Finite MDPs solved by soft value iteration and soft policy iteration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::CheckRow;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMdp {
    pub states: usize,
    pub actions: usize,
    /// `reward[s][a]`.
    pub reward: Vec<Vec<f64>>,
    /// `transition[s][a][s']`, each row sums to one.
    pub transition: Vec<Vec<Vec<f64>>>,
    pub gamma: f64,
}

impl FiniteMdp {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let states = rng.random_range(1..=10);
        let actions = rng.random_range(2..=21);
        let reward = (0..states)
            .map(|_| (0..actions).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let transition = (0..states)
            .map(|_| {
                (0..actions)
                    .map(|_| {
                        let raw: Vec<f64> = (0..states).map(|_| rng.random::<f64>().powi(2) + 1e-3).collect();
                        let total: f64 = raw.iter().sum();
                        raw.into_iter().map(|p| p / total).collect()
                    })
                    .collect()
            })
            .collect();
        Self {
            states,
            actions,
            reward,
            transition,
            gamma: rng.random_range(0.0..0.95),
        }
    }

    fn backup(&self, v: &[f64]) -> Vec<Vec<f64>> {
        (0..self.states)
            .map(|s| {
                (0..self.actions)
                    .map(|a| {
                        let next: f64 = self.transition[s][a].iter().zip(v).map(|(p, v)| p * v).sum();
                        self.reward[s][a] + self.gamma * next
                    })
                    .collect()
            })
            .collect()
    }
}

/// `alpha * log sum_a exp(q_a / alpha)`.
pub fn soft_max(q: &[f64], alpha: f64) -> f64 {
    let m = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + alpha * q.iter().map(|x| ((x - m) / alpha).exp()).sum::<f64>().ln()
}

/// `softmax(q / alpha)`.
pub fn boltzmann(q: &[f64], alpha: f64) -> Vec<f64> {
    let m = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = q.iter().map(|x| ((x - m) / alpha).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn sup_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Soft-optimal `Q*` by iterating the soft Bellman optimality backup.
pub fn soft_value_iteration(mdp: &FiniteMdp, alpha: f64, tol: f64) -> Result<Vec<Vec<f64>>> {
    let mut q = vec![vec![0.0; mdp.actions]; mdp.states];
    for _ in 0..MAX_SWEEPS {
        let v: Vec<f64> = q.iter().map(|row| soft_max(row, alpha)).collect();
        let next = mdp.backup(&v);
        let change = sup_diff(&next, &q);
        q = next;
        if change < tol {
            return Ok(q);
        }
    }
    Err(Error::Oracle(format!("soft value iteration did not converge in {MAX_SWEEPS} sweeps")))
}

/// Soft `Q^pi` with entropy bonus `-alpha log pi` on every next state.
pub fn soft_policy_evaluation(mdp: &FiniteMdp, policy: &[Vec<f64>], alpha: f64, tol: f64) -> Result<Vec<Vec<f64>>> {
    let mut q = vec![vec![0.0; mdp.actions]; mdp.states];
    for _ in 0..MAX_SWEEPS {
        let v: Vec<f64> = q
            .iter()
            .zip(policy)
            .map(|(qs, ps)| {
                qs.iter()
                    .zip(ps)
                    .map(|(q, p)| if *p > 0.0 { p * (q - alpha * p.ln()) } else { 0.0 })
                    .sum()
            })
            .collect();
        let next = mdp.backup(&v);
        let change = sup_diff(&next, &q);
        q = next;
        if change < tol {
            return Ok(q);
        }
    }
    Err(Error::Oracle(format!("soft policy evaluation did not converge in {MAX_SWEEPS} sweeps")))
}

#[derive(Debug, Clone)]
pub struct PolicyIteration {
    pub q: Vec<Vec<f64>>,
    pub policy: Vec<Vec<f64>>,
    pub iterations: usize,
    /// Smallest `Q_new - Q_old` over all improvement steps and pairs.
    pub min_improvement: f64,
}

/// Alternates evaluation and Boltzmann improvement from the uniform policy.
pub fn soft_policy_iteration(mdp: &FiniteMdp, alpha: f64, tol: f64) -> Result<PolicyIteration> {
    let mut policy = vec![vec![1.0 / mdp.actions as f64; mdp.actions]; mdp.states];
    let mut q = soft_policy_evaluation(mdp, &policy, alpha, tol)?;
    let mut min_improvement = f64::INFINITY;
    for iterations in 1..=1000 {
        policy = q.iter().map(|row| boltzmann(row, alpha)).collect();
        let next = soft_policy_evaluation(mdp, &policy, alpha, tol)?;
        let step_min = next
            .iter()
            .flatten()
            .zip(q.iter().flatten())
            .map(|(n, o)| n - o)
            .fold(f64::INFINITY, f64::min);
        min_improvement = min_improvement.min(step_min);
        let change = sup_diff(&next, &q);
        q = next;
        if change < tol {
            return Ok(PolicyIteration {
                q,
                policy,
                iterations,
                min_improvement,
            });
        }
    }
    Err(Error::Oracle("soft policy iteration did not converge in 1000 iterations".into()))
}

pub fn suite(instances: usize) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_0004);
    let (mut worst_improvement, mut worst_policy, mut worst_q) = (f64::INFINITY, 0.0f64, 0.0f64);
    for _ in 0..instances {
        let mdp = FiniteMdp::random(&mut rng);
        let alpha = rng.random_range(0.05..2.0);
        let pi = soft_policy_iteration(&mdp, alpha, 1e-13)?;
        let q_star = soft_value_iteration(&mdp, alpha, 1e-13)?;
        let target: Vec<Vec<f64>> = q_star.iter().map(|row| boltzmann(row, alpha)).collect();
        worst_improvement = worst_improvement.min(pi.min_improvement);
        worst_policy = worst_policy.max(sup_diff(&pi.policy, &target));
        worst_q = worst_q.max(sup_diff(&pi.q, &q_star));
    }
    Ok(vec![
        CheckRow::at_least(format!("tabular/min_q_improvement[{instances}]"), worst_improvement, -1e-9),
        CheckRow::at_most("tabular/policy_vs_boltzmann_q_star", worst_policy, 1e-8),
        CheckRow::at_most("tabular/q_vs_q_star", worst_q, 1e-8),
    ])
}
