//! Denoising diffusion policy.
//!
//! The chain runs backwards from `a^N ~ N(0, eta^2)` to `a^0` with the
//! Euler-Maruyama update
//!
//! ```text
//! a^{n-1} = a^n + (beta_n a^n + 2 eta^2 beta_n f(a^n, s, n)) delta + xi,
//! xi ~ N(0, 2 eta^2 beta_n delta)
//! ```
//!
//! and is scored against the discretized noising process
//! `a^n ~ N((1 - beta_n delta) a^{n-1}, 2 eta^2 beta_n delta)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gaussian_log_pdf, log_one_minus_tanh_sq, softplus, Graph, Var};
use crate::error::{Error, Result, TensorError};
use crate::nn::{Bound, Params, ScoreNetwork};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Number of diffusion steps `N`.
    pub steps: usize,
    /// Process horizon `T`; the step size is `T / N`.
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_beta_min")]
    pub beta_min: f64,
    #[serde(default = "default_beta_max")]
    pub beta_max: f64,
    /// Prior standard deviation.
    #[serde(default = "default_eta")]
    pub eta: f64,
    /// Initial value of the per-dimension multiplier `softplus(scale)`.
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

fn default_horizon() -> f64 {
    1.0
}

fn default_beta_min() -> f64 {
    0.1
}

fn default_beta_max() -> f64 {
    10.0
}

fn default_eta() -> f64 {
    2.5f64.sqrt()
}

fn default_init_scale() -> f64 {
    1.0
}

impl ScheduleConfig {
    pub fn new(steps: usize) -> Self {
        Self {
            steps,
            horizon: default_horizon(),
            beta_min: default_beta_min(),
            beta_max: default_beta_max(),
            eta: default_eta(),
            init_scale: default_init_scale(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if self.steps == 0 {
            return Err(Error::Config("diffusion steps must be at least 1".into()));
        }
        if !positive(self.horizon) || !positive(self.eta) || !positive(self.init_scale) {
            return Err(Error::Config("horizon, eta and init_scale must be positive".into()));
        }
        if !positive(self.beta_min) || !(self.beta_max >= self.beta_min) || !self.beta_max.is_finite() {
            return Err(Error::Config(format!(
                "beta range [{}, {}] is invalid",
                self.beta_min, self.beta_max
            )));
        }
        Ok(())
    }
}

/// Inverse of softplus for positive arguments.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Cosine ramp from `beta_min` to `beta_max` over `n = 0..=N`.
pub fn cosine_beta(n: usize, steps: usize, beta_min: f64, beta_max: f64) -> f64 {
    let ramp = (1.0 - (std::f64::consts::PI * n as f64 / steps as f64).cos()) / 2.0;
    (beta_min + (beta_max - beta_min) * ramp).clamp(beta_min, beta_max)
}

/// Base schedule plus learnable per-dimension scales.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub config: ScheduleConfig,
    pub act_dim: usize,
    /// `base[n]` for `n = 0..=N`; only `1..=N` enter the kernels.
    base: Vec<f64>,
    /// Holds a single `[1, D]` tensor of unconstrained scales.
    pub params: Params,
}

impl NoiseSchedule {
    pub fn new(config: ScheduleConfig, act_dim: usize) -> Result<Self> {
        config.validate()?;
        let base = (0..=config.steps)
            .map(|n| cosine_beta(n, config.steps, config.beta_min, config.beta_max))
            .collect();
        let mut params = Params::new();
        params.push(
            "schedule.scale",
            Tensor::full(&[1, act_dim], softplus_inverse(config.init_scale)),
        );
        Ok(Self {
            config,
            act_dim,
            base,
            params,
        })
    }

    pub fn steps(&self) -> usize {
        self.config.steps
    }

    pub fn delta(&self) -> f64 {
        self.config.horizon / self.config.steps as f64
    }

    pub fn eta(&self) -> f64 {
        self.config.eta
    }

    pub fn check_index(&self, n: usize) -> Result<()> {
        if n == 0 || n > self.config.steps {
            return Err(Error::KernelIndex {
                n,
                steps: self.config.steps,
            });
        }
        Ok(())
    }

    pub fn base_beta(&self, n: usize) -> Result<f64> {
        self.check_index(n)?;
        Ok(self.base[n])
    }

    /// Current `softplus(scale_d)` multipliers.
    pub fn multipliers(&self) -> Vec<f64> {
        self.params.get(0).data().iter().map(|s| softplus(*s)).collect()
    }

    /// Effective `beta_{n,d}` from the current parameter values.
    pub fn beta(&self, n: usize) -> Result<Vec<f64>> {
        let base = self.base_beta(n)?;
        Ok(self.multipliers().into_iter().map(|m| m * base).collect())
    }

    /// Effective `beta_n` as a `[1, D]` graph value, differentiable in the scales.
    pub fn beta_var<'g>(&self, bound: &Bound<'g>, n: usize) -> Result<Var<'g>> {
        let base = self.base_beta(n)?;
        Ok(bound.var(0).softplus()?.mul_scalar(base)?)
    }
}

/// Anything that can play the role of `f(a^n, s, n)`, for `n = 1..=N`.
pub trait ScoreModel {
    fn act_dim(&self) -> usize;
    fn params(&self) -> &Params;
    fn score<'g>(&self, bound: &Bound<'g>, state: Var<'g>, action: Var<'g>, n: usize) -> Result<Var<'g>>;
}

impl ScoreModel for ScoreNetwork {
    fn act_dim(&self) -> usize {
        self.config.act_dim
    }

    fn params(&self) -> &Params {
        &self.params
    }

    fn score<'g>(&self, bound: &Bound<'g>, state: Var<'g>, action: Var<'g>, n: usize) -> Result<Var<'g>> {
        if n == 0 {
            return Err(Error::KernelIndex {
                n,
                steps: self.config.steps,
            });
        }
        self.forward(bound, state, action, n - 1)
    }
}

/// Exact score `-a / v_n` of a linear-Gaussian noising process, where `v_n`
/// is the per-dimension marginal variance of `a^n`.
#[derive(Debug, Clone)]
pub struct GaussianScore {
    variances: Vec<Vec<f64>>,
    params: Params,
}

impl GaussianScore {
    pub fn new(variances: Vec<Vec<f64>>) -> Self {
        Self {
            variances,
            params: Params::new(),
        }
    }

    /// Propagates a centered Gaussian target with per-dimension std `sigma`
    /// through the discretized noising process of `schedule`.
    pub fn for_target(sigma: &[f64], schedule: &NoiseSchedule) -> Result<Self> {
        let delta = schedule.delta();
        let eta2 = schedule.eta().powi(2);
        let mut variances = vec![sigma.iter().map(|s| s * s).collect::<Vec<_>>()];
        for n in 1..=schedule.steps() {
            let beta = schedule.beta(n)?;
            let prev = &variances[n - 1];
            let next = prev
                .iter()
                .zip(&beta)
                .map(|(v, b)| (1.0 - b * delta).powi(2) * v + 2.0 * eta2 * b * delta)
                .collect();
            variances.push(next);
        }
        Ok(Self::new(variances))
    }

    pub fn variance(&self, n: usize) -> &[f64] {
        &self.variances[n]
    }
}

impl ScoreModel for GaussianScore {
    fn act_dim(&self) -> usize {
        self.variances[0].len()
    }

    fn params(&self) -> &Params {
        &self.params
    }

    fn score<'g>(&self, _bound: &Bound<'g>, _state: Var<'g>, action: Var<'g>, n: usize) -> Result<Var<'g>> {
        if n == 0 || n >= self.variances.len() {
            return Err(Error::KernelIndex {
                n,
                steps: self.variances.len() - 1,
            });
        }
        let precision: Vec<f64> = self.variances[n].iter().map(|v| -1.0 / v).collect();
        let row = action.graph().constant_owned(Tensor::from_parts(vec![1, precision.len()], precision));
        Ok(action.mul(row)?)
    }
}

/// Graph leaves for one policy.
#[derive(Debug, Clone)]
pub struct PolicyBound<'g> {
    pub score: Bound<'g>,
    pub schedule: Bound<'g>,
}

/// One sampled chain with every term of the bound kept on the graph.
#[derive(Debug)]
pub struct Trajectory<'g> {
    /// `actions[n]` is `a^n`, for `n = 0..=N`, each `[B, D]`.
    pub actions: Vec<Var<'g>>,
    /// Action handed to the environment: `tanh(a^0)` when squashing, else `a^0`.
    pub env_action: Var<'g>,
    /// `forward[n - 1] = log pi_{n|n-1}(a^n | a^{n-1})`, each `[B, 1]`.
    pub forward: Vec<Var<'g>>,
    /// `backward[n - 1] = log pi_{n-1|n}(a^{n-1} | a^n, s)`, each `[B, 1]`.
    pub backward: Vec<Var<'g>>,
    /// `log pi_N(a^N)`, `[B, 1]`.
    pub prior: Var<'g>,
    /// `sum_d log(1 - tanh^2(a^0_d))` when squashing, `[B, 1]`.
    pub squash: Option<Var<'g>>,
    /// Cached per-row bound estimate, `[B, 1]`.
    pub bound: Var<'g>,
}

impl<'g> Trajectory<'g> {
    pub fn steps(&self) -> usize {
        self.forward.len()
    }
}

/// Recomputes the per-row estimate from the stored per-step terms.
pub fn entropy_lower_bound<'g>(
    forward: &[Var<'g>],
    backward: &[Var<'g>],
    prior: Var<'g>,
    squash: Option<Var<'g>>,
) -> Result<Var<'g>, TensorError> {
    let mut total = prior.neg()?;
    for (f, b) in forward.iter().zip(backward) {
        total = total.add(f.sub(*b)?)?;
    }
    match squash {
        Some(c) => total.add(c),
        None => Ok(total),
    }
}

/// `tanh` squashing with the log-density correction `-sum_d log(1 - tanh^2)`
/// per row.
pub fn squash_action(a0: &Tensor) -> (Tensor, Vec<f64>) {
    let squashed = a0.map(f64::tanh);
    let correction = (0..a0.rows())
        .map(|r| {
            -a0.row_slice(r)
                .iter()
                .map(|x| 2.0 * (std::f64::consts::LN_2 - x - softplus(-2.0 * x)))
                .sum::<f64>()
        })
        .collect();
    (squashed, correction)
}

fn diverged(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Tensor(source) => Error::ChainDiverged { step, source },
        other => other,
    }
}

/// A score model, its noise schedule and the squashing choice.
#[derive(Debug, Clone)]
pub struct DiffusionPolicy<S> {
    pub score: S,
    pub schedule: NoiseSchedule,
    pub squash: bool,
    /// Adds the prior score `-a / eta^2` to the model output, so an untrained
    /// model that outputs zero leaves the prior roughly in place.
    pub prior_skip: bool,
}

impl<S: ScoreModel> DiffusionPolicy<S> {
    pub fn new(score: S, schedule: NoiseSchedule, squash: bool) -> Result<Self> {
        if score.act_dim() != schedule.act_dim {
            return Err(Error::Config(format!(
                "score action dim {} does not match schedule dim {}",
                score.act_dim(),
                schedule.act_dim
            )));
        }
        Ok(Self {
            score,
            schedule,
            squash,
            prior_skip: false,
        })
    }

    pub fn with_prior_skip(mut self, on: bool) -> Self {
        self.prior_skip = on;
        self
    }

    pub fn act_dim(&self) -> usize {
        self.schedule.act_dim
    }

    pub fn bind<'g>(&self, graph: &'g Graph, trainable: bool) -> PolicyBound<'g> {
        PolicyBound {
            score: self.score.params().bind(graph, trainable),
            schedule: self.schedule.params.bind(graph, trainable),
        }
    }

    fn kernel_variance<'g>(&self, bound: &PolicyBound<'g>, n: usize) -> Result<(Var<'g>, Var<'g>)> {
        let beta = self.schedule.beta_var(&bound.schedule, n)?;
        let eta2 = self.schedule.eta().powi(2);
        let var = beta.mul_scalar(2.0 * eta2 * self.schedule.delta())?;
        Ok((beta, var))
    }

    /// `log N(a^n | (1 - beta_n delta) a^{n-1}, 2 eta^2 beta_n delta)` per row.
    pub fn forward_kernel_logprob<'g>(
        &self,
        bound: &PolicyBound<'g>,
        a_n: Var<'g>,
        a_prev: Var<'g>,
        n: usize,
    ) -> Result<Var<'g>> {
        let (beta, var) = self.kernel_variance(bound, n)?;
        let decay = beta.mul_scalar(-self.schedule.delta())?.add_scalar(1.0)?;
        Ok(gaussian_log_pdf(a_n, a_prev.mul(decay)?, var)?)
    }

    fn backward_mean<'g>(&self, bound: &PolicyBound<'g>, beta: Var<'g>, a_n: Var<'g>, state: Var<'g>, n: usize) -> Result<Var<'g>> {
        let mut f = self.score.score(&bound.score, state, a_n, n)?;
        let eta2 = self.schedule.eta().powi(2);
        if self.prior_skip {
            f = f.sub(a_n.mul_scalar(1.0 / eta2)?)?;
        }
        let drift = a_n.add(f.mul_scalar(2.0 * eta2)?)?.mul(beta)?;
        Ok(a_n.add(drift.mul_scalar(self.schedule.delta())?)?)
    }

    /// `log N(a^{n-1} | a^n + (beta_n a^n + 2 eta^2 beta_n f) delta, 2 eta^2 beta_n delta)` per row.
    pub fn backward_kernel_logprob<'g>(
        &self,
        bound: &PolicyBound<'g>,
        a_prev: Var<'g>,
        a_n: Var<'g>,
        state: Var<'g>,
        n: usize,
    ) -> Result<Var<'g>> {
        let (beta, var) = self.kernel_variance(bound, n)?;
        let mean = self.backward_mean(bound, beta, a_n, state, n)?;
        Ok(gaussian_log_pdf(a_prev, mean, var)?)
    }

    pub fn prior_logprob<'g>(&self, a_n: Var<'g>) -> Result<Var<'g>> {
        let graph = a_n.graph();
        let zero = graph.scalar(0.0);
        let var = graph.scalar(self.schedule.eta().powi(2));
        Ok(gaussian_log_pdf(a_n, zero, var)?)
    }

    /// Samples one chain per state row. All noise is drawn up front as graph
    /// constants, so the chain is a differentiable function of the parameters.
    pub fn sample<'g, R: Rng + ?Sized>(&self, bound: &PolicyBound<'g>, state: Var<'g>, rng: &mut R) -> Result<Trajectory<'g>> {
        let graph = state.graph();
        let rows = state.dims2().0;
        let dim = self.act_dim();
        let steps = self.schedule.steps();
        let eta = self.schedule.eta();

        let mut actions = vec![None; steps + 1];
        let prior_sample = graph.constant_owned(Tensor::randn(&[rows, dim], eta, rng));
        actions[steps] = Some(prior_sample);
        let mut forward = vec![None; steps];
        let mut backward = vec![None; steps];
        for n in (1..=steps).rev() {
            let a_n = actions[n].expect("filled on the previous step");
            let (beta, var) = self.kernel_variance(bound, n).map_err(diverged(n))?;
            let mean = self.backward_mean(bound, beta, a_n, state, n).map_err(diverged(n))?;
            let noise = Tensor::randn(&[rows, dim], 1.0, rng);
            let a_prev = var
                .sqrt()
                .and_then(|sd| graph.constant_owned(noise).mul(sd))
                .and_then(|xi| mean.add(xi))
                .map_err(|source| Error::ChainDiverged { step: n, source })?;
            backward[n - 1] = Some(gaussian_log_pdf(a_prev, mean, var).map_err(|source| Error::ChainDiverged { step: n, source })?);
            forward[n - 1] = Some(self.forward_kernel_logprob(bound, a_n, a_prev, n).map_err(diverged(n))?);
            actions[n - 1] = Some(a_prev);
        }
        let actions: Vec<Var<'g>> = actions.into_iter().map(|a| a.expect("chain complete")).collect();
        let forward: Vec<Var<'g>> = forward.into_iter().map(|v| v.expect("chain complete")).collect();
        let backward: Vec<Var<'g>> = backward.into_iter().map(|v| v.expect("chain complete")).collect();
        let prior = self.prior_logprob(actions[steps])?;
        let (env_action, squash) = if self.squash {
            (actions[0].tanh()?, Some(log_one_minus_tanh_sq(actions[0])?.sum_cols()?))
        } else {
            (actions[0], None)
        };
        let bound_est = entropy_lower_bound(&forward, &backward, prior, squash)?;
        Ok(Trajectory {
            actions,
            env_action,
            forward,
            backward,
            prior,
            squash,
            bound: bound_est,
        })
    }

    /// Draws environment actions for a batch of states without keeping a graph.
    pub fn act<R: Rng + ?Sized>(&self, state: &Tensor, rng: &mut R) -> Result<Tensor> {
        let graph = Graph::new();
        let bound = self.bind(&graph, false);
        Ok(self.sample(&bound, graph.constant(state), rng)?.env_action.value())
    }

    /// Noise-free chain started at `a^N = 0`; used for deterministic evaluation.
    pub fn mean_action(&self, state: &Tensor) -> Result<Tensor> {
        let graph = Graph::new();
        let bound = self.bind(&graph, false);
        let state = graph.constant(state);
        let mut a = graph.constant_owned(Tensor::zeros(&[state.dims2().0, self.act_dim()]));
        for n in (1..=self.schedule.steps()).rev() {
            let beta = self.schedule.beta_var(&bound.schedule, n).map_err(diverged(n))?;
            a = self.backward_mean(&bound, beta, a, state, n).map_err(diverged(n))?;
        }
        let a = if self.squash { a.tanh()? } else { a };
        Ok(a.value())
    }
}
