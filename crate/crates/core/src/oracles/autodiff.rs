//! Central finite differences against the tape, for every primitive and for
//! the composed graphs the trainer differentiates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::CheckRow;
use crate::autodiff::{concat_cols, concat_rows, gaussian_log_pdf, log_one_minus_tanh_sq, Graph, Var};
use crate::critic::{critic_loss, softmax_rows, ValueSupport};
use crate::diffusion::{DiffusionPolicy, NoiseSchedule, ScheduleConfig};
use crate::error::{Error, Result, TensorError};
use crate::nn::{CriticConfig, CriticNetwork, RenormConfig, ScoreConfig, ScoreNetwork};
use crate::objective::{policy_loss, FnValue};
use crate::tensor::Tensor;

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared on an absolute scale.
pub const FLOOR: f64 = 1e-3;
/// Coordinates probed per composed-graph check.
const PROBES: usize = 24;

type Res<T> = std::result::Result<T, TensorError>;

/// Builds a loss from leaf values. Returns the output and the leaves whose
/// gradients are compared, one per input tensor and in the same order.
pub trait Case {
    fn build<'g>(&self, graph: &'g Graph, inputs: &[Tensor]) -> Res<(Var<'g>, Vec<Var<'g>>)>;
}

impl<F> Case for F
where
    F: for<'g> Fn(&[Var<'g>]) -> Res<Var<'g>>,
{
    fn build<'g>(&self, graph: &'g Graph, inputs: &[Tensor]) -> Res<(Var<'g>, Vec<Var<'g>>)> {
        let leaves: Vec<Var<'g>> = inputs.iter().map(|t| graph.param(t)).collect();
        Ok((self(&leaves)?, leaves))
    }
}

/// `|ad - fd| / max(|ad|, |fd|, FLOOR)`.
pub fn relative_error(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / ad.abs().max(fd.abs()).max(FLOOR)
}

/// Reduces a non-scalar output with fixed pseudo-random weights so that every
/// entry contributes a distinct direction.
fn scalarize<'g>(out: Var<'g>) -> Res<Var<'g>> {
    if out.shape().iter().product::<usize>() == 1 {
        return out.sum();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let w = Tensor::uniform(&out.shape(), 1.0, &mut rng);
    out.mul(out.graph().constant_owned(w))?.sum()
}

fn evaluate(case: &dyn Case, inputs: &[Tensor]) -> Res<f64> {
    let graph = Graph::new();
    let (out, _) = case.build(&graph, inputs)?;
    Ok(scalarize(out)?.item())
}

/// Largest relative error over the probed coordinates; all coordinates when
/// `probes` is `None`.
pub fn max_error<R: Rng + ?Sized>(case: &dyn Case, inputs: &[Tensor], probes: Option<usize>, rng: &mut R) -> Result<f64> {
    let graph = Graph::new();
    let (out, leaves) = case.build(&graph, inputs)?;
    if leaves.len() != inputs.len() {
        return Err(Error::Oracle("case returned the wrong number of leaves".into()));
    }
    let grads = graph.backward(scalarize(out)?)?;
    let analytic: Vec<Tensor> = leaves.iter().map(|v| grads.wrt(*v)).collect();
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    let chosen: Vec<(usize, usize)> = match probes {
        Some(k) if k < coords.len() => rand::seq::index::sample(rng, coords.len(), k).into_iter().map(|i| coords[i]).collect(),
        _ => coords,
    };
    let mut worst = 0.0_f64;
    for (i, j) in chosen {
        let mut shifted = inputs.to_vec();
        shifted[i].data_mut()[j] += STEP;
        let plus = evaluate(case, &shifted)?;
        shifted[i].data_mut()[j] -= 2.0 * STEP;
        let minus = evaluate(case, &shifted)?;
        let fd = (plus - minus) / (2.0 * STEP);
        let err = relative_error(analytic[i].data()[j], fd);
        if !err.is_finite() {
            return Err(Error::Oracle(format!("non-finite gradient error at input {i}, entry {j}")));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Entries in `[lo, hi]` with random signs; keeps inputs away from kinks and poles.
fn away<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(lo..hi);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

fn positive<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    away(shape, 0.3, 2.0, rng).map(f64::abs)
}

fn normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

struct Primitive {
    name: &'static str,
    inputs: Vec<Tensor>,
    case: Box<dyn Case>,
}

fn prim<F>(name: &'static str, inputs: Vec<Tensor>, case: F) -> Primitive
where
    F: for<'g> Fn(&[Var<'g>]) -> Res<Var<'g>> + 'static,
{
    Primitive {
        name,
        inputs,
        case: Box::new(case),
    }
}

fn primitives<R: Rng + ?Sized>(rng: &mut R) -> Vec<Primitive> {
    let r = rng.random_range(1..=4);
    let c = rng.random_range(1..=4);
    let k = rng.random_range(1..=4);
    let m = [r, c];
    let mut out = vec![
        prim("matmul", vec![normal(&[r, k], rng), normal(&[k, c], rng)], |v| v[0].matmul(v[1])),
        prim(
            "affine",
            vec![normal(&[r, k], rng), normal(&[k, c], rng), normal(&[1, c], rng)],
            |v| v[0].affine(v[1], v[2]),
        ),
        prim("add_scalar", vec![normal(&m, rng)], |v| v[0].add_scalar(0.7)),
        prim("mul_scalar", vec![normal(&m, rng)], |v| v[0].mul_scalar(-1.3)),
        prim("neg", vec![normal(&m, rng)], |v| v[0].neg()),
        prim("sum", vec![normal(&m, rng)], |v| v[0].sum()),
        prim("mean", vec![normal(&m, rng)], |v| v[0].mean()),
        prim("sum_cols", vec![normal(&m, rng)], |v| v[0].sum_cols()),
        prim("sum_rows", vec![normal(&m, rng)], |v| v[0].sum_rows()),
        prim("mean_rows", vec![normal(&m, rng)], |v| v[0].mean_rows()),
        prim("tanh", vec![normal(&m, rng)], |v| v[0].tanh()),
        prim("gelu", vec![normal(&m, rng)], |v| v[0].gelu()),
        prim("softplus", vec![normal(&m, rng)], |v| v[0].softplus()),
        prim("relu", vec![away(&m, 0.05, 2.0, rng)], |v| v[0].relu()),
        prim("exp", vec![normal(&m, rng)], |v| v[0].exp()),
        prim("log", vec![positive(&m, rng)], |v| v[0].log()),
        prim("sqrt", vec![positive(&m, rng)], |v| v[0].sqrt()),
        prim("square", vec![normal(&m, rng)], |v| v[0].square()),
        prim("clip", vec![away(&m, 0.05, 0.95, rng).map(|x| 2.0 * x)], |v| v[0].clip(-1.0, 1.0)),
        prim("log_softmax", vec![normal(&m, rng)], |v| v[0].log_softmax()),
        prim("broadcast_rows", vec![normal(&[1, c], rng)], move |v| v[0].broadcast_rows(r + 1)),
        prim("slice_cols", vec![normal(&[r, c + 2], rng)], move |v| v[0].slice_cols(1, c + 1)),
        prim("slice_rows", vec![normal(&[r + 2, c], rng)], move |v| v[0].slice_rows(1, r + 1)),
        prim("concat_cols", vec![normal(&[r, c], rng), normal(&[r, k], rng)], |v| concat_cols(v)),
        prim("concat_rows", vec![normal(&[r, c], rng), normal(&[k, c], rng)], |v| concat_rows(v)),
        prim(
            "gaussian_log_pdf",
            vec![normal(&m, rng), normal(&m, rng), positive(&m, rng)],
            |v| gaussian_log_pdf(v[0], v[1], v[2]),
        ),
        prim("log_one_minus_tanh_sq", vec![normal(&m, rng)], |v| log_one_minus_tanh_sq(v[0])),
    ];
    for rhs in [[r, c], [1, c], [r, 1], [1, 1]] {
        out.push(prim("add", vec![normal(&m, rng), normal(&rhs, rng)], |v| v[0].add(v[1])));
        out.push(prim("sub", vec![normal(&rhs, rng), normal(&m, rng)], |v| v[0].sub(v[1])));
        out.push(prim("mul", vec![normal(&m, rng), normal(&rhs, rng)], |v| v[0].mul(v[1])));
        out.push(prim("div", vec![normal(&m, rng), away(&rhs, 0.5, 2.0, rng)], |v| v[0].div(v[1])));
    }
    out
}

/// Two-layer perceptron with every activation the networks use.
fn mlp<'g>(v: &[Var<'g>]) -> Res<Var<'g>> {
    let h = v[0].affine(v[1], v[2])?.gelu()?;
    let h = h.affine(v[3], v[4])?.tanh()?;
    let h = h.affine(v[5], v[6])?.softplus()?;
    h.log_softmax()?.exp()?.sum_cols()?.log()?.add(h.mean_rows()?.sum_cols()?)
}

fn mlp_inputs<R: Rng + ?Sized>(rng: &mut R) -> Vec<Tensor> {
    let (b, i, h, o) = (5, 3, 6, 4);
    vec![
        normal(&[b, i], rng),
        normal(&[i, h], rng),
        normal(&[1, h], rng),
        normal(&[h, h], rng),
        normal(&[1, h], rng),
        normal(&[h, o], rng),
        normal(&[1, o], rng),
    ]
}

/// Gradients with respect to network parameters go through `Params`, so the
/// cases below rebuild a network from the probed tensors.
fn randomized<R: Rng + ?Sized>(params: &mut crate::nn::Params, rng: &mut R) {
    for t in params.tensors_mut() {
        *t = Tensor::randn(t.shape(), 0.4, rng);
    }
}

struct ScoreCase {
    net: ScoreNetwork,
    state: Tensor,
    action: Tensor,
    step: usize,
}

impl Case for ScoreCase {
    fn build<'g>(&self, graph: &'g Graph, inputs: &[Tensor]) -> Res<(Var<'g>, Vec<Var<'g>>)> {
        let mut net = self.net.clone();
        for (t, v) in net.params.tensors_mut().zip(inputs) {
            *t = v.clone();
        }
        let bound = net.params.bind(graph, true);
        let out = net
            .forward(&bound, graph.constant(&self.state), graph.constant(&self.action), self.step)
            .map_err(|e| TensorError::Invalid {
                op: "score_forward",
                reason: e.to_string(),
            })?;
        Ok((out, bound.vars().to_vec()))
    }
}

struct CriticCase {
    net: CriticNetwork,
    head: usize,
    state: Tensor,
    action: Tensor,
    target: Tensor,
}

impl Case for CriticCase {
    fn build<'g>(&self, graph: &'g Graph, inputs: &[Tensor]) -> Res<(Var<'g>, Vec<Var<'g>>)> {
        let mut net = self.net.clone();
        for (t, v) in net.heads[self.head].params.tensors_mut().zip(inputs) {
            *t = v.clone();
        }
        let bound = net.bind(graph, true);
        let half = self.state.shape()[0] / 2;
        let split = |t: &Tensor, lo: usize, hi: usize| graph.constant(t).slice_rows(lo, hi);
        let rows = self.state.shape()[0];
        let out = net.forward_joint(
            &bound,
            (split(&self.state, 0, half)?, split(&self.action, 0, half)?),
            (split(&self.state, half, rows)?, split(&self.action, half, rows)?),
        )?;
        let loss = critic_loss(&out.current[self.head..=self.head], &self.target)?;
        Ok((loss, bound[self.head].vars().to_vec()))
    }
}

struct PolicyCase {
    policy: DiffusionPolicy<ScoreNetwork>,
    state: Tensor,
    alpha: f64,
    noise_seed: u64,
}

impl PolicyCase {
    fn inputs(&self) -> Vec<Tensor> {
        let mut v: Vec<Tensor> = self.policy.score.params.iter().map(|(_, t)| t.clone()).collect();
        v.extend(self.policy.schedule.params.iter().map(|(_, t)| t.clone()));
        v
    }
}

fn bowl<'g>(_s: Var<'g>, a: Var<'g>) -> Res<Var<'g>> {
    a.sub(a.graph().scalar(0.3))?.square()?.mul_scalar(-0.5)?.sum_cols()
}

impl Case for PolicyCase {
    fn build<'g>(&self, graph: &'g Graph, inputs: &[Tensor]) -> Res<(Var<'g>, Vec<Var<'g>>)> {
        let mut policy = self.policy.clone();
        let n = policy.score.params.len();
        for (t, v) in policy.score.params.tensors_mut().zip(&inputs[..n]) {
            *t = v.clone();
        }
        for (t, v) in policy.schedule.params.tensors_mut().zip(&inputs[n..]) {
            *t = v.clone();
        }
        let bound = policy.bind(graph, true);
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
        let out = policy_loss(&policy, &bound, &FnValue(bowl), self.alpha, graph.constant(&self.state), &mut rng).map_err(|e| {
            TensorError::Invalid {
                op: "policy_loss",
                reason: e.to_string(),
            }
        })?;
        let mut leaves = bound.score.vars().to_vec();
        leaves.extend_from_slice(bound.schedule.vars());
        Ok((out.loss, leaves))
    }
}

fn score_case<R: Rng + ?Sized>(rng: &mut R) -> (ScoreCase, Vec<Tensor>) {
    let steps = 4;
    let mut net = ScoreNetwork::new(
        ScoreConfig {
            obs_dim: 3,
            act_dim: 2,
            hidden: 8,
            fourier_pairs: 3,
            time_hidden: 5,
            time_embed: 4,
            steps,
        },
        rng,
    );
    randomized(&mut net.params, rng);
    let inputs = net.params.iter().map(|(_, t)| t.clone()).collect();
    let case = ScoreCase {
        state: normal(&[6, 3], rng),
        action: normal(&[6, 2], rng),
        step: rng.random_range(0..steps),
        net,
    };
    (case, inputs)
}

fn critic_case<R: Rng + ?Sized>(rng: &mut R) -> Result<(CriticCase, Vec<Tensor>)> {
    let bins = 7;
    // r pinned to 1 and d to 0 so training mode is plain batch normalization,
    // a smooth function of its inputs.
    let renorm = RenormConfig {
        r_max: 1.0,
        d_max: 0.0,
        ..RenormConfig::default()
    };
    let mut net = CriticNetwork::new(
        CriticConfig {
            obs_dim: 3,
            act_dim: 2,
            hidden: 6,
            outputs: bins,
            renorm,
        },
        rng,
    );
    let head = rng.random_range(0..2);
    randomized(&mut net.heads[head].params, rng);
    let rows = 12;
    let support = ValueSupport::new(bins, -1.0, 1.0)?;
    let target = softmax_rows(&normal(&[rows / 2, support.bins], rng));
    let inputs = net.heads[head].params.iter().map(|(_, t)| t.clone()).collect();
    let case = CriticCase {
        state: normal(&[rows, 3], rng),
        action: away(&[rows, 2], 0.0, 1.0, rng),
        target,
        head,
        net,
    };
    Ok((case, inputs))
}

fn policy_case<R: Rng + ?Sized>(rng: &mut R) -> Result<PolicyCase> {
    let steps = 4;
    let act_dim = 2;
    let mut net = ScoreNetwork::new(
        ScoreConfig {
            obs_dim: 2,
            act_dim,
            hidden: 6,
            fourier_pairs: 2,
            time_hidden: 4,
            time_embed: 3,
            steps,
        },
        rng,
    );
    randomized(&mut net.params, rng);
    let schedule = NoiseSchedule::new(
        ScheduleConfig {
            eta: rng.random_range(0.7..1.6),
            ..ScheduleConfig::new(steps)
        },
        act_dim,
    )?;
    let policy = DiffusionPolicy::new(net, schedule, true)?.with_prior_skip(rng.random_bool(0.5));
    Ok(PolicyCase {
        policy,
        state: normal(&[8, 2], rng),
        alpha: rng.random_range(0.1..2.0),
        noise_seed: rng.random(),
    })
}

/// Worst error per check over `seeds` random instances.
pub fn errors(seeds: u64) -> Result<Vec<(String, f64)>> {
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut record = |name: &str, e: f64| match worst.iter_mut().find(|(n, _)| n == name) {
        Some((_, w)) => *w = w.max(e),
        None => worst.push((name.to_string(), e)),
    };
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in primitives(&mut rng) {
            let e = max_error(p.case.as_ref(), &p.inputs, None, &mut rng)?;
            record(p.name, e);
        }
        let inputs = mlp_inputs(&mut rng);
        record("composed/mlp", max_error(&mlp, &inputs, None, &mut rng)?);
        let (case, inputs) = score_case(&mut rng);
        record("composed/score_network", max_error(&case, &inputs, Some(PROBES), &mut rng)?);
        let (case, inputs) = critic_case(&mut rng)?;
        record("composed/critic_loss", max_error(&case, &inputs, Some(PROBES), &mut rng)?);
        let case = policy_case(&mut rng)?;
        let inputs = case.inputs();
        record("composed/policy_loss", max_error(&case, &inputs, Some(PROBES), &mut rng)?);
    }
    Ok(worst)
}

pub fn suite(seeds: u64) -> Result<Vec<CheckRow>> {
    Ok(errors(seeds)?
        .into_iter()
        .map(|(name, e)| CheckRow::at_most(format!("autodiff/{name}"), e, 1e-4))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // stop_gradient hides one path, so the tape must disagree with differences.
        fn case<'g>(v: &[Var<'g>]) -> Res<Var<'g>> {
            v[0].mul(v[0].stop_gradient())
        }
        let x = Tensor::row(vec![1.5, -2.0]).unwrap();
        let e = max_error(&case, &[x], None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(e > 0.1);
    }

    #[test]
    fn few_seeds_pass() {
        for row in suite(3).unwrap() {
            assert!(row.pass, "{row:?}");
        }
    }
}
