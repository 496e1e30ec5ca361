use dime_core::experience::{make, ReplayBuffer, Transition, ENVIRONMENTS};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn transition(v: f64) -> Transition {
    Transition {
        state: vec![v],
        action: vec![0.0],
        reward: v,
        next_state: vec![v],
        done: false,
    }
}

#[test]
fn sampling_frequencies_are_uniform() {
    const SLOTS: usize = 100_000;
    let mut buf = ReplayBuffer::new(SLOTS, 1, 1).unwrap();
    for i in 0..SLOTS {
        buf.insert(transition(i as f64)).unwrap();
    }
    let mut counts = vec![0u32; SLOTS];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10_000 {
        for i in buf.sample_indices(256, &mut rng).unwrap() {
            counts[i] += 1;
        }
    }
    let n = 10_000.0 * 256.0;
    let p = 1.0 / SLOTS as f64;
    let expect = n * p;
    let sd = (n * p * (1.0 - p)).sqrt();
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
    // chi-square with SLOTS - 1 degrees of freedom, within 3 standard deviations
    let dof = (SLOTS - 1) as f64;
    assert!((chi2 - dof).abs() < 3.0 * (2.0 * dof).sqrt(), "chi2 {chi2}");
    let outside = counts.iter().filter(|&&c| (c as f64 - expect).abs() > 3.0 * sd).count();
    assert!((outside as f64) < 0.005 * SLOTS as f64, "{outside} slots beyond 3 sd");
}

#[test]
fn declared_reward_bounds_hold_under_random_actions() {
    for id in ENVIRONMENTS {
        let mut env = make(id).unwrap();
        let spec = env.spec();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut episode = 0u64;
        env.reset(episode);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for _ in 0..1_000_000 {
            let a: Vec<f64> = (0..spec.act_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s = env.step(&a);
            assert!(s.reward.is_finite());
            lo = lo.min(s.reward);
            hi = hi.max(s.reward);
            if s.done || s.truncated {
                episode += 1;
                env.reset(episode);
            }
        }
        assert!(lo >= spec.reward_min && hi <= spec.reward_max, "{id}: [{lo}, {hi}] vs [{}, {}]", spec.reward_min, spec.reward_max);
    }
}

#[test]
fn bandit_argmax_on_a_grid_is_a_mode() {
    let mut env = make("bandit").unwrap();
    let h = 2.0 / 9999.0;
    let (mut best, mut arg) = (f64::NEG_INFINITY, 0.0);
    for i in 0..10_000 {
        let a = -1.0 + i as f64 * h;
        let r = env.step(&[a]).reward;
        if r > best {
            best = r;
            arg = a;
        }
    }
    assert!((arg.abs() - 0.7).abs() <= h, "{arg}");
}

proptest! {
    #[test]
    fn buffer_keeps_the_newest_capacity_items(capacity in 1usize..40, inserts in 0usize..120) {
        let mut buf = ReplayBuffer::new(capacity, 1, 1).unwrap();
        for i in 0..inserts {
            buf.insert(transition(i as f64)).unwrap();
            prop_assert!(buf.len() <= capacity);
        }
        prop_assert_eq!(buf.len(), inserts.min(capacity));
        let mut kept: Vec<f64> = (0..buf.len()).map(|i| buf.get(i).unwrap().reward).collect();
        kept.sort_by(f64::total_cmp);
        let expect: Vec<f64> = (inserts.saturating_sub(capacity)..inserts).map(|i| i as f64).collect();
        prop_assert_eq!(kept, expect);
    }

    #[test]
    fn identical_seeds_and_actions_give_identical_trajectories(
        env_index in 0usize..3,
        seed in any::<u64>(),
        actions in prop::collection::vec(-1.5f64..1.5, 1..60),
    ) {
        let id = ENVIRONMENTS[env_index];
        let run = || {
            let mut env = make(id).unwrap();
            let dim = env.spec().act_dim;
            let mut out = vec![env.reset(seed)];
            for a in &actions {
                let s = env.step(&vec![*a; dim]);
                out.push(s.observation.clone());
                out.push(vec![s.reward]);
                if s.done || s.truncated {
                    break;
                }
            }
            out
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn samples_stay_in_range(size in 1usize..50, batch in 1usize..50, seed in any::<u64>()) {
        let mut buf = ReplayBuffer::new(64, 1, 1).unwrap();
        for i in 0..size {
            buf.insert(transition(i as f64)).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match buf.sample_indices(batch, &mut rng) {
            Ok(idx) => {
                prop_assert!(batch <= size);
                prop_assert!(idx.iter().all(|&i| i < size));
            }
            Err(_) => prop_assert!(batch > size),
        }
    }
}
