//! Policy improvement loss and temperature tuning.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::critic::{q_mean_logits, ValueSupport};
use crate::diffusion::{DiffusionPolicy, PolicyBound, ScoreModel, Trajectory};
use crate::error::{Error, Result, TensorError};
use crate::nn::{Adam, AdamConfig, Bound, CriticNetwork};

/// A differentiable action-value `Q(s, a) -> [B, 1]`.
pub trait ActionValue {
    fn q<'g>(&self, graph: &'g Graph, state: Var<'g>, action: Var<'g>) -> Result<Var<'g>>;
}

/// Twin critic read in evaluation mode, heads averaged. Parameters enter the
/// graph as constants, so only the action carries gradient.
#[derive(Debug, Clone, Copy)]
pub struct CriticValue<'a> {
    pub network: &'a CriticNetwork,
    /// `None` for scalar heads.
    pub support: Option<&'a ValueSupport>,
}

impl ActionValue for CriticValue<'_> {
    fn q<'g>(&self, graph: &'g Graph, state: Var<'g>, action: Var<'g>) -> Result<Var<'g>> {
        let bound: [Bound<'g>; 2] = self.network.bind(graph, false);
        let out = self.network.forward_eval(&bound, state, action)?;
        let head = |v: Var<'g>| -> Result<Var<'g>, TensorError> {
            match self.support {
                Some(s) => q_mean_logits(v, s),
                None => Ok(v),
            }
        };
        Ok(head(out.heads[0])?.add(head(out.heads[1])?)?.mul_scalar(0.5)?)
    }
}

/// Wraps a closure as an [`ActionValue`].
pub struct FnValue<F>(pub F);

impl<F> ActionValue for FnValue<F>
where
    F: for<'g> Fn(Var<'g>, Var<'g>) -> Result<Var<'g>, TensorError>,
{
    fn q<'g>(&self, _graph: &'g Graph, state: Var<'g>, action: Var<'g>) -> Result<Var<'g>> {
        Ok((self.0)(state, action)?)
    }
}

#[derive(Debug)]
pub struct PolicyLoss<'g> {
    /// `mean(-Q(s, a) - alpha * l)`.
    pub loss: Var<'g>,
    pub trajectory: Trajectory<'g>,
    /// Batch mean of the bound estimate.
    pub bound_mean: f64,
    /// Batch mean of `Q(s, a)`.
    pub q_mean: f64,
}

/// Samples a chain per state and scores it. Gradients reach the score model
/// and schedule scales through the whole chain.
pub fn policy_loss<'g, S: ScoreModel, Q: ActionValue, R: Rng + ?Sized>(
    policy: &DiffusionPolicy<S>,
    bound: &PolicyBound<'g>,
    value: &Q,
    alpha: f64,
    states: Var<'g>,
    rng: &mut R,
) -> Result<PolicyLoss<'g>> {
    if states.dims2().0 == 0 {
        return Err(Error::Config("policy loss needs a non-empty batch".into()));
    }
    let graph = states.graph();
    let trajectory = policy.sample(bound, states, rng)?;
    let q = value.q(graph, states, trajectory.env_action)?;
    let loss = q.add(trajectory.bound.mul_scalar(alpha)?)?.neg()?.mean()?;
    let bound_mean = trajectory.bound.with_value(|t| t.mean());
    let q_mean = q.with_value(|t| t.mean());
    Ok(PolicyLoss {
        loss,
        trajectory,
        bound_mean,
        q_mean,
    })
}

/// Direction of the temperature update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemperatureSign {
    /// `alpha` grows while the entropy proxy is below target.
    Sac,
    /// The opposite direction, as the objective `alpha (H_target - l)` reads literally.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemperatureConfig {
    #[serde(default = "default_alpha")]
    pub initial: f64,
    /// Entropy target; `None` means `4 * dim(A)`.
    #[serde(default)]
    pub target: Option<f64>,
    #[serde(default = "default_temperature_lr")]
    pub lr: f64,
    /// When false, `alpha` stays at `initial`.
    #[serde(default = "default_true")]
    pub learn: bool,
    #[serde(default = "default_sign")]
    pub sign: TemperatureSign,
}

fn default_alpha() -> f64 {
    1.0
}

fn default_temperature_lr() -> f64 {
    1e-3
}

fn default_true() -> bool {
    true
}

fn default_sign() -> TemperatureSign {
    TemperatureSign::Sac
}

impl Default for TemperatureConfig {
    fn default() -> Self {
        Self {
            initial: default_alpha(),
            target: None,
            lr: default_temperature_lr(),
            learn: true,
            sign: default_sign(),
        }
    }
}

/// Log-parameterized temperature with its own Adam state.
#[derive(Debug, Clone)]
pub struct Temperature {
    pub log_alpha: f64,
    pub target: f64,
    pub learn: bool,
    pub sign: TemperatureSign,
    adam: Adam,
}

impl Temperature {
    pub fn new(config: TemperatureConfig, act_dim: usize) -> Result<Self> {
        if !(config.initial > 0.0 && config.initial.is_finite()) {
            return Err(Error::Config(format!("initial temperature {} must be positive", config.initial)));
        }
        if !(config.lr > 0.0) {
            return Err(Error::Config(format!("temperature learning rate {} must be positive", config.lr)));
        }
        Ok(Self {
            log_alpha: config.initial.ln(),
            target: config.target.unwrap_or(4.0 * act_dim as f64),
            learn: config.learn,
            sign: config.sign,
            adam: Adam::new(AdamConfig::with_lr(config.lr)),
        })
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    /// Gradient of `log_alpha * (l - H_target)` (or its negation) in `log_alpha`.
    pub fn gradient(&self, bound_mean: f64) -> f64 {
        let g = bound_mean - self.target;
        match self.sign {
            TemperatureSign::Sac => g,
            TemperatureSign::Literal => -g,
        }
    }

    /// One Adam step on `log_alpha` using a gradient-free bound estimate.
    pub fn update(&mut self, bound_mean: f64) {
        if !self.learn {
            return;
        }
        let grad = [self.gradient(bound_mean)];
        let mut value = [self.log_alpha];
        self.adam.step_slices(&mut [&mut value[..]], &[&grad[..]]);
        self.log_alpha = value[0];
    }
}
