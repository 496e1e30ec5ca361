use dime_core::autodiff::{Graph, Var};
use dime_core::diffusion::{DiffusionPolicy, NoiseSchedule, ScheduleConfig};
use dime_core::nn::{Adam, AdamConfig, ScoreConfig, ScoreNetwork};
use dime_core::objective::{policy_loss, FnValue};
use dime_core::{Tensor, TensorError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bowl<'g>(_s: Var<'g>, a: Var<'g>) -> Result<Var<'g>, TensorError> {
    a.square()?.mul_scalar(-0.5)?.sum_cols()
}

// With Q(a) = -a^2 / 2 and alpha = 1 the optimal policy is N(0, 1).
#[test]
fn unimodal_target_is_matched() {
    let steps = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let score = ScoreNetwork::new(
        ScoreConfig {
            obs_dim: 1,
            act_dim: 1,
            hidden: 32,
            fourier_pairs: 4,
            time_hidden: 16,
            time_embed: 8,
            steps,
        },
        &mut rng,
    );
    let schedule = NoiseSchedule::new(
        ScheduleConfig {
            eta: 2.5f64.sqrt(),
            ..ScheduleConfig::new(steps)
        },
        1,
    )
    .unwrap();
    let mut policy = DiffusionPolicy::new(score, schedule, false).unwrap().with_prior_skip(true);
    let mut score_opt = Adam::new(AdamConfig::with_lr(1e-3));
    let mut schedule_opt = Adam::new(AdamConfig::with_lr(1e-3));
    let states = Tensor::zeros(&[64, 1]);
    for _ in 0..3000 {
        let g = Graph::new();
        let bound = policy.bind(&g, true);
        let out = policy_loss(&policy, &bound, &FnValue(bowl), 1.0, g.constant(&states), &mut rng).unwrap();
        let grads = g.backward(out.loss).unwrap();
        score_opt.step(&mut policy.score.params, &bound.score.gradients(&grads));
        schedule_opt.step(&mut policy.schedule.params, &bound.schedule.gradients(&grads));
    }
    let samples = policy.act(&Tensor::zeros(&[100_000, 1]), &mut rng).unwrap();
    let n = samples.data().len() as f64;
    let mean = samples.data().iter().sum::<f64>() / n;
    let var = samples.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    // KL between the moment-matched Gaussian and N(0, 1)
    let kl = 0.5 * (var - 1.0 - var.ln() + mean * mean);
    assert!(kl < 0.05, "mean {mean} var {var} kl {kl}");
}
