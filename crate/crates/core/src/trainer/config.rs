use serde::{Deserialize, Serialize};

use crate::critic::ValueSupport;
use crate::diffusion::ScheduleConfig;
use crate::error::{Error, Result};
use crate::experience::EnvSpec;
use crate::nn::RenormConfig;
use crate::objective::TemperatureConfig;

/// How the critic represents values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticMode {
    /// Categorical bins with projected targets and cross-entropy.
    Distributional,
    /// Scalar heads with a squared Bellman residual.
    Scalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreWidths {
    pub hidden: usize,
    pub fourier_pairs: usize,
    pub time_hidden: usize,
    pub time_embed: usize,
}

impl Default for ScoreWidths {
    fn default() -> Self {
        Self {
            hidden: 128,
            fourier_pairs: 8,
            time_hidden: 64,
            time_embed: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub env: String,
    pub seed: u64,
    /// Environment steps `M`.
    pub total_steps: usize,
    /// Uniform random actions before learning starts.
    pub exploration_steps: usize,
    /// Gradient steps per environment step.
    pub utd: usize,
    /// Actor and temperature update every `policy_delay` critic updates.
    pub policy_delay: usize,
    pub batch_size: usize,
    pub gamma: f64,
    pub buffer_capacity: usize,
    pub critic_lr: f64,
    pub actor_lr: f64,
    /// Adam first-moment decay shared by the critic and actor optimizers.
    pub adam_beta1: f64,
    pub diffusion: ScheduleConfig,
    pub score: ScoreWidths,
    pub critic_hidden: usize,
    pub critic_mode: CriticMode,
    pub bins: usize,
    /// Value range; derived from the environment's reward bounds when absent.
    pub v_min: Option<f64>,
    pub v_max: Option<f64>,
    pub renorm: RenormConfig,
    pub temperature: TemperatureConfig,
    pub squash: bool,
    pub prior_skip: bool,
    /// Environment steps between evaluations; 0 disables periodic evaluation.
    pub eval_interval: usize,
    pub eval_episodes: usize,
    /// Environment steps between checkpoints; 0 keeps only the final one.
    pub checkpoint_interval: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            env: "pointmass2d".into(),
            seed: 0,
            total_steps: 100_000,
            exploration_steps: 5_000,
            utd: 2,
            policy_delay: 1,
            batch_size: 256,
            gamma: 0.99,
            buffer_capacity: 1_000_000,
            critic_lr: 3e-4,
            actor_lr: 3e-4,
            adam_beta1: 0.9,
            diffusion: ScheduleConfig::new(16),
            score: ScoreWidths::default(),
            critic_hidden: 256,
            critic_mode: CriticMode::Distributional,
            bins: 100,
            v_min: None,
            v_max: None,
            renorm: RenormConfig::default(),
            temperature: TemperatureConfig::default(),
            squash: true,
            prior_skip: true,
            eval_interval: 5_000,
            eval_episodes: 10,
            checkpoint_interval: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let rate = |v: f64| v.is_finite() && v > 0.0;
        if !rate(self.critic_lr) || !rate(self.actor_lr) || !rate(self.temperature.lr) {
            return bad("learning rates must be positive".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) {
            return bad(format!("adam_beta1 {} outside [0, 1)", self.adam_beta1));
        }
        if self.utd == 0 || self.policy_delay == 0 {
            return bad("utd and policy_delay must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2 for batch renormalization".into());
        }
        if self.exploration_steps < self.batch_size {
            return bad(format!(
                "exploration_steps ({}) must cover one batch ({})",
                self.exploration_steps, self.batch_size
            ));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma {} outside [0, 1)", self.gamma));
        }
        if self.buffer_capacity < self.batch_size {
            return bad("buffer_capacity must hold at least one batch".into());
        }
        if self.critic_mode == CriticMode::Distributional && self.bins < 2 {
            return bad("bins must be at least 2".into());
        }
        if self.eval_interval > 0 && self.eval_episodes == 0 {
            return bad("eval_episodes must be at least 1".into());
        }
        let widths = [
            self.score.hidden,
            self.score.fourier_pairs,
            self.score.time_hidden,
            self.score.time_embed,
            self.critic_hidden,
        ];
        if widths.contains(&0) {
            return bad("network widths must be positive".into());
        }
        self.diffusion.validate()
    }

    /// Explicit range if configured, else `[r_min, r_max]` scaled by the
    /// environment's discounted horizon.
    pub fn value_support(&self, spec: &EnvSpec) -> Result<ValueSupport> {
        let scale = spec.return_scale(self.gamma);
        let v_min = self.v_min.unwrap_or(spec.reward_min * scale);
        let v_max = self.v_max.unwrap_or(spec.reward_max * scale);
        ValueSupport::new(self.bins.max(2), v_min, v_max)
    }
}
