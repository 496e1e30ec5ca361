use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dime_bench::{agent, batch, config};
use dime_core::autodiff::Graph;
use dime_core::experience::ReplayBuffer;
use dime_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sampling(c: &mut Criterion) {
    let mut group = c.benchmark_group("act");
    for steps in [2, 8, 16] {
        let cfg = config(steps, 32);
        let agent = agent(&cfg);
        let state = Tensor::zeros(&[1, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        group.bench_with_input(BenchmarkId::new("stochastic", steps), &steps, |b, _| {
            b.iter(|| agent.act(&state, &mut rng).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("deterministic", steps), &steps, |b, _| {
            b.iter(|| agent.act_deterministic(&[0.1, -0.2, 0.0, 0.0]).unwrap())
        });
    }
    group.finish();
}

fn updates(c: &mut Criterion) {
    let mut group = c.benchmark_group("update");
    group.sample_size(20);
    for steps in [2, 8, 16] {
        let cfg = config(steps, 32);
        let mut agent = agent(&cfg);
        let batch = batch(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        group.bench_with_input(BenchmarkId::new("critic", steps), &steps, |b, _| {
            b.iter(|| agent.update_critic(&batch, &mut rng).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("actor", steps), &steps, |b, _| {
            b.iter(|| agent.update_actor(&batch.states, &mut rng).unwrap())
        });
    }
    group.finish();
}

fn kernels(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::randn(&[256, 128], 1.0, &mut rng);
    let w = Tensor::randn(&[128, 128], 0.1, &mut rng);
    c.bench_function("matmul_backward 256x128x128", |b| {
        b.iter(|| {
            let g = Graph::new();
            let (xv, wv) = (g.constant(&x), g.param(&w));
            let loss = xv.matmul(wv).unwrap().tanh().unwrap().sum().unwrap();
            g.backward(loss).unwrap()
        })
    });

    let mut buffer = ReplayBuffer::new(100_000, 4, 2).unwrap();
    let cfg = config(8, 256);
    let full = batch(&config(8, 1));
    for _ in 0..100_000 {
        buffer
            .insert(dime_core::Transition {
                state: full.states.row_slice(0).to_vec(),
                action: full.actions.row_slice(0).to_vec(),
                reward: full.rewards[0],
                next_state: full.next_states.row_slice(0).to_vec(),
                done: false,
            })
            .unwrap();
    }
    c.bench_function("replay sample 256", |b| b.iter(|| buffer.sample(cfg.batch_size, &mut rng).unwrap()));
}

criterion_group!(benches, sampling, updates, kernels);
criterion_main!(benches);
