use rand::Rng;

use super::config::{CriticMode, TrainerConfig};
use crate::autodiff::Graph;
use crate::critic::{bellman_target, critic_loss, scalar_bellman_residual, scalar_bellman_target, softmax_rows, TargetInputs, ValueSupport};
use crate::diffusion::{DiffusionPolicy, NoiseSchedule};
use crate::error::{Error, Result, TensorError};
use crate::experience::{Batch, EnvSpec};
use crate::nn::{Adam, AdamConfig, CriticConfig, CriticNetwork, RenormStats, ScoreConfig, ScoreNetwork};
use crate::objective::{policy_loss, CriticValue, Temperature};
use crate::tensor::Tensor;

/// Policy, critic, temperature and their optimizer state.
#[derive(Debug, Clone)]
pub struct Agent {
    pub config: TrainerConfig,
    pub spec: EnvSpec,
    pub policy: DiffusionPolicy<ScoreNetwork>,
    pub critic: CriticNetwork,
    pub support: ValueSupport,
    pub temperature: Temperature,
    score_opt: Adam,
    schedule_opt: Adam,
    critic_opts: [Adam; 2],
    pub critic_updates: u64,
    pub actor_updates: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticStep {
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActorStep {
    pub loss: f64,
    pub bound_mean: f64,
    pub q_mean: f64,
}

fn finite(what: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(TensorError::NonFinite { op: what, index: 0 }.into())
    }
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(config: TrainerConfig, spec: EnvSpec, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let score = ScoreNetwork::new(
            ScoreConfig {
                obs_dim: spec.obs_dim,
                act_dim: spec.act_dim,
                hidden: config.score.hidden,
                fourier_pairs: config.score.fourier_pairs,
                time_hidden: config.score.time_hidden,
                time_embed: config.score.time_embed,
                steps: config.diffusion.steps,
            },
            rng,
        );
        let schedule = NoiseSchedule::new(config.diffusion, spec.act_dim)?;
        let policy = DiffusionPolicy::new(score, schedule, config.squash)?.with_prior_skip(config.prior_skip);
        let support = config.value_support(&spec)?;
        let outputs = match config.critic_mode {
            CriticMode::Distributional => support.bins,
            CriticMode::Scalar => 1,
        };
        let critic = CriticNetwork::new(
            CriticConfig {
                obs_dim: spec.obs_dim,
                act_dim: spec.act_dim,
                hidden: config.critic_hidden,
                outputs,
                renorm: config.renorm,
            },
            rng,
        );
        let temperature = Temperature::new(config.temperature, spec.act_dim)?;
        let adam = |lr: f64| {
            Adam::new(AdamConfig {
                beta1: config.adam_beta1,
                ..AdamConfig::with_lr(lr)
            })
        };
        Ok(Self {
            score_opt: adam(config.actor_lr),
            schedule_opt: adam(config.actor_lr),
            critic_opts: [adam(config.critic_lr), adam(config.critic_lr)],
            config,
            spec,
            policy,
            critic,
            support,
            temperature,
            critic_updates: 0,
            actor_updates: 0,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.temperature.alpha()
    }

    /// Stochastic actions for a batch of observations.
    pub fn act<R: Rng + ?Sized>(&self, states: &Tensor, rng: &mut R) -> Result<Tensor> {
        self.policy.act(states, rng)
    }

    /// Noise-free chain output for a single observation.
    pub fn act_deterministic(&self, obs: &[f64]) -> Result<Vec<f64>> {
        let state = Tensor::new(vec![1, obs.len()], obs.to_vec())?;
        Ok(self.policy.mean_action(&state)?.into_data())
    }

    /// One critic step on `batch`; next actions are drawn fresh from the policy.
    pub fn update_critic<R: Rng + ?Sized>(&mut self, batch: &Batch, rng: &mut R) -> Result<CriticStep> {
        let (next_actions, next_bound) = {
            let graph = Graph::new();
            let bound = self.policy.bind(&graph, false);
            let t = self.policy.sample(&bound, graph.constant(&batch.next_states), rng)?;
            (t.env_action.value(), t.bound.value().into_data())
        };
        let inputs = TargetInputs {
            rewards: &batch.rewards,
            dones: &batch.dones,
            gamma: self.config.gamma,
            alpha: self.alpha(),
            next_bound: &next_bound,
        };
        let graph = Graph::new();
        let bound = self.critic.bind(&graph, true);
        let out = self.critic.forward_joint(
            &bound,
            (graph.constant(&batch.states), graph.constant(&batch.actions)),
            (graph.constant(&batch.next_states), graph.constant_owned(next_actions)),
        )?;
        let loss = match self.config.critic_mode {
            CriticMode::Distributional => {
                let p0 = softmax_rows(&out.next[0].value());
                let p1 = softmax_rows(&out.next[1].value());
                let target = bellman_target(&self.support, inputs, [&p0, &p1])?;
                critic_loss(&out.current, &target)?
            }
            CriticMode::Scalar => {
                let q0 = out.next[0].value().into_data();
                let q1 = out.next[1].value().into_data();
                let target = scalar_bellman_target(inputs, [&q0, &q1])?;
                let target = Tensor::new(vec![target.len(), 1], target)?;
                scalar_bellman_residual(out.current[0], &target)?
                    .add(scalar_bellman_residual(out.current[1], &target)?)?
                    .mul_scalar(0.5)?
            }
        };
        let loss_value = finite("critic_loss", loss.item())?;
        let grads = graph.backward(loss)?;
        for (h, b) in bound.iter().enumerate() {
            let g = b.gradients(&grads);
            self.critic_opts[h].step(&mut self.critic.heads[h].params, &g);
        }
        self.critic.commit_stats(out.stats);
        self.critic_updates += 1;
        Ok(CriticStep { loss: loss_value })
    }

    /// One actor step on `states`, followed by one temperature step.
    pub fn update_actor<R: Rng + ?Sized>(&mut self, states: &Tensor, rng: &mut R) -> Result<ActorStep> {
        let graph = Graph::new();
        let bound = self.policy.bind(&graph, true);
        let value = CriticValue {
            network: &self.critic,
            support: match self.config.critic_mode {
                CriticMode::Distributional => Some(&self.support),
                CriticMode::Scalar => None,
            },
        };
        let out = policy_loss(&self.policy, &bound, &value, self.alpha(), graph.constant(states), rng)?;
        let loss = finite("policy_loss", out.loss.item())?;
        let bound_mean = finite("entropy_bound", out.bound_mean)?;
        let grads = graph.backward(out.loss)?;
        self.score_opt.step(&mut self.policy.score.params, &bound.score.gradients(&grads));
        self.schedule_opt.step(&mut self.policy.schedule.params, &bound.schedule.gradients(&grads));
        self.temperature.update(bound_mean);
        self.actor_updates += 1;
        Ok(ActorStep {
            loss,
            bound_mean,
            q_mean: out.q_mean,
        })
    }

    /// Norms of every parameter group, for diagnostics.
    pub fn parameter_norms(&self) -> Vec<(String, f64)> {
        vec![
            ("score".into(), self.policy.score.params.norm()),
            ("schedule".into(), self.policy.schedule.params.norm()),
            ("critic.q0".into(), self.critic.heads[0].params.norm()),
            ("critic.q1".into(), self.critic.heads[1].params.norm()),
            ("log_alpha".into(), self.temperature.log_alpha.abs()),
        ]
    }

    /// All learned state as named tensors.
    pub fn to_entries(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let params = [&self.policy.score.params, &self.policy.schedule.params, &self.critic.heads[0].params, &self.critic.heads[1].params];
        for p in params {
            out.extend(p.iter().map(|(n, t)| (n.to_string(), t.clone())));
        }
        for (h, head) in self.critic.heads.iter().enumerate() {
            for (i, stats) in head.stats().iter().enumerate() {
                let row = |v: &[f64]| Tensor::from_parts(vec![1, v.len()], v.to_vec());
                out.push((format!("critic.q{h}.bn{i}.running_mean"), row(&stats.mean)));
                out.push((format!("critic.q{h}.bn{i}.running_var"), row(&stats.var)));
            }
        }
        out.push(("temperature.log_alpha".into(), Tensor::scalar(self.temperature.log_alpha)));
        out
    }

    /// Restores state written by [`Agent::to_entries`] into an agent built
    /// from the same configuration.
    pub fn load_entries(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        let lookup = |name: &str| {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Config(format!("checkpoint is missing `{name}`")))
        };
        let [q0, q1] = &mut self.critic.heads;
        for p in [
            &mut self.policy.score.params,
            &mut self.policy.schedule.params,
            &mut q0.params,
            &mut q1.params,
        ] {
            let names: Vec<String> = p.names().map(String::from).collect();
            for name in names {
                p.set(&name, lookup(&name)?)?;
            }
        }
        for h in 0..2 {
            let mut stats = Vec::new();
            for i in 0..2 {
                let mean = lookup(&format!("critic.q{h}.bn{i}.running_mean"))?.into_data();
                let var = lookup(&format!("critic.q{h}.bn{i}.running_var"))?.into_data();
                if mean.len() != self.config.critic_hidden || var.len() != mean.len() {
                    return Err(Error::Config(format!("renorm statistics for head {h} have the wrong width")));
                }
                stats.push(RenormStats { mean, var });
            }
            let [a, b]: [RenormStats; 2] = stats.try_into().expect("two layers");
            self.critic.heads[h].set_stats([a, b]);
        }
        self.temperature.log_alpha = lookup("temperature.log_alpha")?.item();
        Ok(())
    }
}
