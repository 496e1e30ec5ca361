//! Fixtures shared by the benchmarks.

use dime_core::experience::{make, Batch, ReplayBuffer, Transition};
use dime_core::{Agent, ScoreWidths, TrainerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Point-mass configuration at the widths used for desk-scale runs.
pub fn config(steps: usize, batch_size: usize) -> TrainerConfig {
    let mut c = TrainerConfig {
        env: "pointmass2d".into(),
        batch_size,
        exploration_steps: batch_size,
        critic_hidden: 64,
        bins: 51,
        score: ScoreWidths {
            hidden: 64,
            fourier_pairs: 8,
            time_hidden: 32,
            time_embed: 16,
        },
        ..TrainerConfig::default()
    };
    c.diffusion.steps = steps;
    c
}

pub fn agent(config: &TrainerConfig) -> Agent {
    let spec = make(&config.env).unwrap().spec();
    Agent::new(config.clone(), spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
}

/// A minibatch of random-policy transitions.
pub fn batch(config: &TrainerConfig) -> Batch {
    let mut env = make(&config.env).unwrap();
    let spec = env.spec();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut buffer = ReplayBuffer::new(4096, spec.obs_dim, spec.act_dim).unwrap();
    let mut obs = env.reset(0);
    for i in 0..4096u64 {
        let action: Vec<f64> = (0..spec.act_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let step = env.step(&action);
        let next = if step.truncated { env.reset(i) } else { step.observation.clone() };
        buffer
            .insert(Transition {
                state: std::mem::replace(&mut obs, next),
                action,
                reward: step.reward,
                next_state: step.observation,
                done: step.done,
            })
            .unwrap();
    }
    buffer.sample(config.batch_size, &mut rng).unwrap()
}
