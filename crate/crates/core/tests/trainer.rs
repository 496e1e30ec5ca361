use dime_core::experience::{make, Bandit, EnvSpec, Environment, StepResult};
use dime_core::trainer::{evaluate, train, train_with, ScoreWidths, TrainerConfig};
use dime_core::{CriticMode, Error};

fn tiny(env: &str) -> TrainerConfig {
    let mut c = TrainerConfig {
        env: env.into(),
        total_steps: 300,
        exploration_steps: 100,
        batch_size: 8,
        critic_hidden: 16,
        bins: 11,
        eval_interval: 100,
        eval_episodes: 2,
        score: ScoreWidths {
            hidden: 16,
            fourier_pairs: 2,
            time_hidden: 8,
            time_embed: 4,
        },
        ..TrainerConfig::default()
    };
    c.diffusion.steps = 2;
    c
}

#[test]
fn zero_steps_give_empty_metrics() {
    let out = train(&TrainerConfig {
        total_steps: 0,
        ..tiny("pointmass2d")
    })
    .unwrap();
    assert!(out.metrics.records.is_empty());
    assert_eq!(out.agent.critic_updates, 0);
}

#[test]
fn update_counts_follow_the_schedule() {
    for (utd, delay) in [(1, 1), (2, 3), (3, 2)] {
        let config = TrainerConfig {
            utd,
            policy_delay: delay,
            ..tiny("bandit")
        };
        let out = train(&config).unwrap();
        let critic = ((config.total_steps - config.exploration_steps) * utd) as u64;
        assert_eq!(out.agent.critic_updates, critic);
        assert_eq!(out.agent.actor_updates, critic / delay as u64);
        let last = out.metrics.records.last().unwrap();
        assert_eq!((last.critic_updates, last.actor_updates), (critic, critic / delay as u64));
    }
}

#[test]
fn eval_steps_are_increasing() {
    let out = train(&TrainerConfig {
        total_steps: 250,
        ..tiny("pendulum")
    })
    .unwrap();
    let steps: Vec<usize> = out.metrics.records.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![100, 200, 250]);
}

#[test]
fn identical_configs_give_identical_records() {
    for mode in [CriticMode::Distributional, CriticMode::Scalar] {
        let config = TrainerConfig {
            critic_mode: mode,
            seed: 42,
            ..tiny("pointmass2d")
        };
        let a = train(&config).unwrap().metrics.records;
        let b = train(&config).unwrap().metrics.records;
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c = train(&TrainerConfig { seed: 43, ..config }).unwrap().metrics.records;
        assert_ne!(a, c);
    }
}

/// The bandit, except every reward from step `poison_at` on is NaN.
struct Poisoned {
    inner: Bandit,
    steps: usize,
    poison_at: usize,
}

impl Environment for Poisoned {
    fn spec(&self) -> EnvSpec {
        self.inner.spec()
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.inner.reset(seed)
    }

    fn step(&mut self, action: &[f64]) -> StepResult {
        self.steps += 1;
        let mut s = self.inner.step(action);
        if self.steps > self.poison_at {
            s.reward = f64::NAN;
        }
        s
    }
}

#[test]
fn nan_reward_aborts_with_a_snapshot() {
    let env = Box::new(Poisoned {
        inner: Bandit::default(),
        steps: 0,
        poison_at: 150,
    });
    match train_with(&tiny("bandit"), env, &mut ()) {
        Err(Error::Aborted(snap)) => {
            assert_eq!(snap.step, 150);
            assert!(snap.reason.contains("non-finite"), "{}", snap.reason);
            assert!(snap.critic_loss.is_some());
            assert!(!snap.parameter_norms.is_empty());
        }
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("training continued past a NaN reward"),
    }
}

/// Always pays 0.25 per step for ten steps.
struct Constant(usize);

impl Environment for Constant {
    fn spec(&self) -> EnvSpec {
        EnvSpec {
            id: "constant".into(),
            obs_dim: 1,
            act_dim: 1,
            reward_min: 0.25,
            reward_max: 0.25,
            horizon: 10,
            terminal_at_horizon: true,
        }
    }

    fn reset(&mut self, _seed: u64) -> Vec<f64> {
        self.0 = 0;
        vec![0.0]
    }

    fn step(&mut self, _action: &[f64]) -> StepResult {
        self.0 += 1;
        StepResult {
            observation: vec![0.0],
            reward: 0.25,
            done: self.0 >= 10,
            truncated: false,
        }
    }
}

#[test]
fn constant_reward_iqm_is_the_episode_sum() {
    let stats = evaluate(&mut Constant(0), 7, 3, |_| Ok(vec![0.3])).unwrap();
    assert_eq!(stats.iqm, 2.5);
    assert_eq!(stats.mean, 2.5);
    assert_eq!((stats.ci_low, stats.ci_high), (2.5, 2.5));
    assert!(evaluate(&mut Constant(0), 0, 3, |_| Ok(vec![0.0])).is_err());
}

#[test]
fn unknown_environment_is_reported() {
    assert!(matches!(train(&tiny("cartpole")), Err(Error::UnknownEnvironment(_))));
    assert!(make("cartpole").is_err());
}
