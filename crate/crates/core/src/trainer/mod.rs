//! The interaction and update loop, evaluation and run records.

mod agent;
mod config;
pub mod stats;

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use agent::{ActorStep, Agent, CriticStep};
pub use config::{CriticMode, ScoreWidths, TrainerConfig};

use crate::error::{Error, Result};
use crate::experience::{make, Environment, ReplayBuffer, Transition};
use crate::tensor::Tensor;

/// Diagnostic state captured when training aborts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbortSnapshot {
    pub step: usize,
    pub reason: String,
    pub critic_loss: Option<f64>,
    pub policy_loss: Option<f64>,
    pub alpha: f64,
    pub parameter_norms: Vec<(String, f64)>,
}

impl fmt::Display for AbortSnapshot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step {}: {}", self.step, self.reason)?;
        if let Some(l) = self.critic_loss {
            write!(f, "; last critic loss {l}")?;
        }
        if let Some(l) = self.policy_loss {
            write!(f, "; last policy loss {l}")?;
        }
        write!(f, "; alpha {}", self.alpha)?;
        for (name, norm) in &self.parameter_norms {
            write!(f, "; |{name}| = {norm}")?;
        }
        Ok(())
    }
}

/// Returns of a batch of evaluation episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub returns: Vec<f64>,
    pub mean: f64,
    pub iqm: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl EvalStats {
    pub fn from_returns(returns: Vec<f64>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ci_low, ci_high) = stats::stratified_bootstrap(std::slice::from_ref(&returns), stats::iqm, 1000, 0.95, &mut rng);
        Self {
            mean: stats::mean(&returns),
            iqm: stats::iqm(&returns),
            ci_low,
            ci_high,
            returns,
        }
    }
}

/// Runs `episodes` episodes with seeds `seed, seed + 1, ...` and summarizes
/// the undiscounted returns.
pub fn evaluate<F>(env: &mut dyn Environment, episodes: usize, seed: u64, mut policy: F) -> Result<EvalStats>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let horizon = env.spec().horizon;
    let mut returns = Vec::with_capacity(episodes);
    for e in 0..episodes {
        let mut obs = env.reset(seed.wrapping_add(e as u64));
        let mut total = 0.0;
        for _ in 0..horizon {
            let step = env.step(&policy(&obs)?);
            total += step.reward;
            obs = step.observation;
            if step.done || step.truncated {
                break;
            }
        }
        returns.push(total);
    }
    Ok(EvalStats::from_returns(returns, seed))
}

/// One evaluation point. Every field is a deterministic function of the
/// configuration; wall-clock time is reported separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub return_mean: f64,
    pub return_iqm: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Mean bound estimate over the actor updates since the previous record.
    pub bound_mean: Option<f64>,
    pub alpha: f64,
    pub critic_loss: Option<f64>,
    pub policy_loss: Option<f64>,
    pub critic_updates: u64,
    pub actor_updates: u64,
    /// Effective diffusion-coefficient multipliers per action dimension.
    pub beta_scale: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub records: Vec<EvalRecord>,
    /// Seconds since the start of training at each record.
    pub wall_seconds: Vec<f64>,
}

/// Hooks for streaming results out of [`train_with`].
pub trait Observer {
    fn on_eval(&mut self, _record: &EvalRecord, _wall_seconds: f64) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _step: usize, _agent: &Agent) -> Result<()> {
        Ok(())
    }
}

impl Observer for () {}

pub struct TrainOutcome {
    pub agent: Agent,
    pub metrics: RunMetrics,
}

/// Trains on the registered environment named in the configuration.
pub fn train(config: &TrainerConfig) -> Result<TrainOutcome> {
    let env = make(&config.env)?;
    train_with(config, env, &mut ())
}

/// Seeds for the independent random streams of one run.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Default)]
struct Window {
    critic_loss: Option<f64>,
    policy_loss: Option<f64>,
    bound_sum: f64,
    bound_count: usize,
}

/// Interaction loop: one environment step, then `utd` critic updates once the
/// exploration phase is over, with actor and temperature updates every
/// `policy_delay` critic updates.
pub fn train_with(config: &TrainerConfig, mut env: Box<dyn Environment>, observer: &mut dyn Observer) -> Result<TrainOutcome> {
    config.validate()?;
    let spec = env.spec();
    let mut eval_env = make(&spec.id);
    let mut init_rng = stream(config.seed, 0);
    let mut act_rng = stream(config.seed, 1);
    let mut update_rng = stream(config.seed, 2);
    let mut episode_rng = stream(config.seed, 3);
    let eval_seed = stream(config.seed, 4).random::<u64>() >> 1;

    let mut agent = Agent::new(config.clone(), spec.clone(), &mut init_rng)?;
    let mut buffer = ReplayBuffer::new(config.buffer_capacity, spec.obs_dim, spec.act_dim)?;
    let mut metrics = RunMetrics::default();
    let mut window = Window::default();
    let started = Instant::now();

    let abort = |agent: &Agent, step: usize, window: &Window, reason: String| {
        Error::Aborted(Box::new(AbortSnapshot {
            step,
            reason,
            critic_loss: window.critic_loss,
            policy_loss: window.policy_loss,
            alpha: agent.alpha(),
            parameter_norms: agent.parameter_norms(),
        }))
    };

    let mut obs = env.reset(episode_rng.random());
    for t in 0..config.total_steps {
        let action = if t < config.exploration_steps {
            (0..spec.act_dim).map(|_| act_rng.random_range(-1.0..1.0)).collect()
        } else {
            let state = Tensor::new(vec![1, spec.obs_dim], obs.clone())?;
            agent
                .act(&state, &mut act_rng)
                .map_err(|e| abort(&agent, t, &window, format!("action sampling failed: {e}")))?
                .into_data()
        };
        let step = env.step(&action);
        if !step.reward.is_finite() || step.observation.iter().any(|v| !v.is_finite()) {
            return Err(abort(&agent, t, &window, format!("environment returned non-finite values (reward {})", step.reward)));
        }
        buffer.insert(Transition {
            state: std::mem::take(&mut obs),
            action,
            reward: step.reward,
            next_state: step.observation.clone(),
            done: step.done,
        })?;
        obs = if step.done || step.truncated {
            env.reset(episode_rng.random())
        } else {
            step.observation
        };

        if t >= config.exploration_steps {
            for _ in 0..config.utd {
                let batch = buffer.sample(config.batch_size, &mut update_rng)?;
                let c = agent
                    .update_critic(&batch, &mut update_rng)
                    .map_err(|e| abort(&agent, t, &window, format!("critic update failed: {e}")))?;
                window.critic_loss = Some(c.loss);
                if agent.critic_updates % config.policy_delay as u64 == 0 {
                    let a = agent
                        .update_actor(&batch.states, &mut update_rng)
                        .map_err(|e| abort(&agent, t, &window, format!("actor update failed: {e}")))?;
                    window.policy_loss = Some(a.loss);
                    window.bound_sum += a.bound_mean;
                    window.bound_count += 1;
                }
            }
        }

        let done_steps = t + 1;
        let eval_due = config.eval_interval > 0
            && (done_steps % config.eval_interval == 0 || done_steps == config.total_steps);
        if eval_due {
            let env = eval_env.as_mut().map_err(|_| Error::UnknownEnvironment(spec.id.clone()))?;
            let stats = evaluate(env.as_mut(), config.eval_episodes, eval_seed, |o| agent.act_deterministic(o))
                .map_err(|e| abort(&agent, t, &window, format!("evaluation failed: {e}")))?;
            let record = EvalRecord {
                step: done_steps,
                return_mean: stats.mean,
                return_iqm: stats.iqm,
                ci_low: stats.ci_low,
                ci_high: stats.ci_high,
                bound_mean: (window.bound_count > 0).then(|| window.bound_sum / window.bound_count as f64),
                alpha: agent.alpha(),
                critic_loss: window.critic_loss,
                policy_loss: window.policy_loss,
                critic_updates: agent.critic_updates,
                actor_updates: agent.actor_updates,
                beta_scale: agent.policy.schedule.multipliers(),
            };
            window.bound_sum = 0.0;
            window.bound_count = 0;
            let wall = started.elapsed().as_secs_f64();
            observer.on_eval(&record, wall)?;
            metrics.records.push(record);
            metrics.wall_seconds.push(wall);
        }
        if config.checkpoint_interval > 0 && done_steps % config.checkpoint_interval == 0 {
            observer.on_checkpoint(done_steps, &agent)?;
        }
    }
    Ok(TrainOutcome { agent, metrics })
}
