//! Batch renormalization.
//!
//! Training mode normalizes with batch statistics and then corrects towards
//! the running statistics with the clipped, gradient-free factors `r` and `d`.
//! Evaluation mode uses only the running statistics.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Bound, Params};
use crate::autodiff::Var;
use crate::error::TensorError;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenormConfig {
    pub momentum: f64,
    pub r_max: f64,
    pub d_max: f64,
    pub eps: f64,
}

impl Default for RenormConfig {
    fn default() -> Self {
        Self {
            momentum: 0.99,
            r_max: 3.0,
            d_max: 5.0,
            eps: 1e-5,
        }
    }
}

/// Running per-feature mean and variance.
#[derive(Debug, Clone, PartialEq)]
pub struct RenormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RenormStats {
    pub fn fresh(features: usize) -> Self {
        Self {
            mean: vec![0.0; features],
            var: vec![1.0; features],
        }
    }

    pub fn is_valid(&self) -> bool {
        self.mean.iter().all(|m| m.is_finite()) && self.var.iter().all(|v| v.is_finite() && *v > 0.0)
    }
}

/// A renormalization layer: learned affine slots plus running statistics.
#[derive(Debug, Clone)]
pub struct BatchRenorm {
    pub gamma: usize,
    pub beta: usize,
    pub features: usize,
    pub config: RenormConfig,
    pub stats: RenormStats,
}

impl BatchRenorm {
    pub fn new(params: &mut Params, name: &str, features: usize, config: RenormConfig) -> Self {
        let gamma = params.push(format!("{name}.gamma"), Tensor::full(&[1, features], 1.0));
        let beta = params.push(format!("{name}.beta"), Tensor::zeros(&[1, features]));
        Self {
            gamma,
            beta,
            features,
            config,
            stats: RenormStats::fresh(features),
        }
    }

    /// Training forward. Returns the output and the updated running
    /// statistics; the caller decides whether to commit them.
    pub fn forward_train<'g>(&self, bound: &Bound<'g>, x: Var<'g>) -> Result<(Var<'g>, RenormStats), TensorError> {
        let (rows, cols) = x.dims2();
        if rows < 2 {
            return Err(TensorError::Invalid {
                op: "batch_renorm",
                reason: format!("training mode needs a batch of at least 2 rows, got {rows}"),
            });
        }
        if cols != self.features {
            return Err(TensorError::Shape {
                op: "batch_renorm",
                lhs: x.shape(),
                rhs: vec![rows, self.features],
            });
        }
        let cfg = self.config;
        let mean = x.mean_rows()?;
        let centered = x.sub(mean)?;
        let batch_var = centered.square()?.mean_rows()?;
        let sigma = batch_var.add_scalar(cfg.eps)?.sqrt()?;
        let normalized = centered.div(sigma)?;

        let mean_v = mean.value();
        let var_v = batch_var.value();
        let sigma_v = sigma.value();
        let mut r = Vec::with_capacity(cols);
        let mut d = Vec::with_capacity(cols);
        for j in 0..cols {
            let run_sigma = (self.stats.var[j] + cfg.eps).sqrt();
            r.push((sigma_v.data()[j] / run_sigma).clamp(1.0 / cfg.r_max, cfg.r_max));
            d.push(((mean_v.data()[j] - self.stats.mean[j]) / run_sigma).clamp(-cfg.d_max, cfg.d_max));
        }
        let graph = x.graph();
        let r = graph.constant_owned(Tensor::from_parts(vec![1, cols], r));
        let d = graph.constant_owned(Tensor::from_parts(vec![1, cols], d));
        let y = normalized.mul(r)?.add(d)?;
        let out = y.mul(bound.var(self.gamma))?.add(bound.var(self.beta))?;

        let unbias = rows as f64 / (rows as f64 - 1.0);
        let m = cfg.momentum;
        let stats = RenormStats {
            mean: self
                .stats
                .mean
                .iter()
                .zip(mean_v.data())
                .map(|(run, b)| m * run + (1.0 - m) * b)
                .collect(),
            var: self
                .stats
                .var
                .iter()
                .zip(var_v.data())
                .map(|(run, b)| m * run + (1.0 - m) * b * unbias)
                .collect(),
        };
        Ok((out, stats))
    }

    /// Evaluation forward: a pure function of input, running stats and affine.
    pub fn forward_eval<'g>(&self, bound: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>, TensorError> {
        let cols = self.features;
        let graph = x.graph();
        let mean = graph.constant_owned(Tensor::from_parts(vec![1, cols], self.stats.mean.clone()));
        let inv_sigma = graph.constant_owned(Tensor::from_parts(
            vec![1, cols],
            self.stats.var.iter().map(|v| 1.0 / (v + self.config.eps).sqrt()).collect(),
        ));
        x.sub(mean)?
            .mul(inv_sigma)?
            .mul(bound.var(self.gamma))?
            .add(bound.var(self.beta))
    }

    /// Randomizes running statistics; used by tests that need a non-trivial state.
    pub fn perturb_stats<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for m in &mut self.stats.mean {
            *m = rng.random_range(-1.0..1.0);
        }
        for v in &mut self.stats.var {
            *v = rng.random_range(0.5..2.0);
        }
    }
}
