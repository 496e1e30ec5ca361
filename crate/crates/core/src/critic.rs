//! Categorical value distributions, the soft Bellman target and critic losses.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result, TensorError};
use crate::tensor::Tensor;

pub use crate::nn::{CriticConfig, CriticNetwork};

/// Weight of the prediction-entropy term in [`critic_loss`].
pub const ENTROPY_WEIGHT: f64 = 0.005;

/// Evenly spaced value bins `z_0 = v_min < ... < z_{B-1} = v_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValueSupport {
    pub bins: usize,
    pub v_min: f64,
    pub v_max: f64,
}

impl ValueSupport {
    pub fn new(bins: usize, v_min: f64, v_max: f64) -> Result<Self> {
        if bins < 2 {
            return Err(Error::Config(format!("value support needs at least 2 bins, got {bins}")));
        }
        if !(v_min.is_finite() && v_max.is_finite() && v_min < v_max) {
            return Err(Error::Config(format!("value range [{v_min}, {v_max}] is empty")));
        }
        Ok(Self { bins, v_min, v_max })
    }

    pub fn width(&self) -> f64 {
        (self.v_max - self.v_min) / (self.bins - 1) as f64
    }

    pub fn atom(&self, i: usize) -> f64 {
        if i + 1 == self.bins {
            self.v_max
        } else {
            self.v_min + i as f64 * self.width()
        }
    }

    pub fn atoms(&self) -> Vec<f64> {
        (0..self.bins).map(|i| self.atom(i)).collect()
    }

    /// Atoms as a `[B, 1]` column, for `probs.matmul(column)`.
    pub fn column(&self) -> Tensor {
        Tensor::from_parts(vec![self.bins, 1], self.atoms())
    }
}

/// `sum_i q_i z_i`.
pub fn q_mean(probs: &[f64], support: &ValueSupport) -> f64 {
    probs.iter().zip(support.atoms()).map(|(q, z)| q * z).sum()
}

/// Row-wise expected value of softmax(logits): `[R, B] -> [R, 1]`.
pub fn q_mean_logits<'g>(logits: Var<'g>, support: &ValueSupport) -> Result<Var<'g>, TensorError> {
    let probs = logits.log_softmax()?.exp()?;
    probs.matmul(logits.graph().constant_owned(support.column()))
}

/// Row-wise softmax of a logits tensor.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let (rows, cols) = logits.dims2();
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let row = logits.row_slice(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / total));
    }
    Tensor::from_parts(vec![rows, cols], out)
}

/// Projects point masses `probs[i]` at `values[i]` onto the support. Each
/// value is clipped to `[v_min, v_max]` and spread over the two bins whose
/// triangle kernels `max(0, 1 - |y - z_j| / width)` cover it.
pub fn project(support: &ValueSupport, values: &[f64], probs: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    let width = support.width();
    let last = support.bins - 1;
    for (&y, &p) in values.iter().zip(probs) {
        let pos = ((y.clamp(support.v_min, support.v_max) - support.v_min) / width).clamp(0.0, last as f64);
        let j = (pos.floor() as usize).min(last);
        let upper = pos - j as f64;
        out[j] += p * (1.0 - upper);
        if j < last {
            out[j + 1] += p * upper;
        }
    }
}

/// Inputs of the distributional soft Bellman target for one batch.
#[derive(Debug, Clone, Copy)]
pub struct TargetInputs<'a> {
    pub rewards: &'a [f64],
    pub dones: &'a [bool],
    pub gamma: f64,
    pub alpha: f64,
    /// Bound estimate at a fresh next action, one per row.
    pub next_bound: &'a [f64],
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Config(format!("discount {gamma} outside [0, 1)")));
    }
    Ok(())
}

/// Atoms of the twin-averaged next distribution shifted to
/// `r + (1 - done) gamma (z_i + alpha l)` and projected back onto the support.
pub fn bellman_target(support: &ValueSupport, inputs: TargetInputs<'_>, next_probs: [&Tensor; 2]) -> Result<Tensor> {
    check_gamma(inputs.gamma)?;
    let (rows, cols) = next_probs[0].dims2();
    if cols != support.bins || next_probs[1].dims2() != (rows, cols) || inputs.rewards.len() != rows || inputs.dones.len() != rows || inputs.next_bound.len() != rows
    {
        return Err(TensorError::Shape {
            op: "bellman_target",
            lhs: next_probs[0].shape().to_vec(),
            rhs: vec![inputs.rewards.len(), support.bins],
        }
        .into());
    }
    let atoms = support.atoms();
    let mut out = vec![0.0; rows * cols];
    let mut values = vec![0.0; cols];
    let mut probs = vec![0.0; cols];
    for r in 0..rows {
        let discount = if inputs.dones[r] { 0.0 } else { inputs.gamma };
        let bonus = inputs.alpha * inputs.next_bound[r];
        for i in 0..cols {
            values[i] = inputs.rewards[r] + discount * (atoms[i] + bonus);
            probs[i] = 0.5 * (next_probs[0].get(r, i) + next_probs[1].get(r, i));
        }
        project(support, &values, &probs, &mut out[r * cols..(r + 1) * cols]);
    }
    Ok(Tensor::new(vec![rows, cols], out)?)
}

/// `r + (1 - done) gamma (mean(Q_0, Q_1) + alpha l)` per row, for scalar heads.
pub fn scalar_bellman_target(inputs: TargetInputs<'_>, next_q: [&[f64]; 2]) -> Result<Vec<f64>> {
    check_gamma(inputs.gamma)?;
    Ok((0..inputs.rewards.len())
        .map(|r| {
            let discount = if inputs.dones[r] { 0.0 } else { inputs.gamma };
            let q = 0.5 * (next_q[0][r] + next_q[1][r]);
            inputs.rewards[r] + discount * (q + inputs.alpha * inputs.next_bound[r])
        })
        .collect())
}

/// `-sum q_target log q + ENTROPY_WEIGHT * (-sum q log q)`, averaged over rows
/// and over the given heads.
pub fn critic_loss<'g>(pred_logits: &[Var<'g>], target: &Tensor) -> Result<Var<'g>, TensorError> {
    let mut total: Option<Var<'g>> = None;
    for logits in pred_logits {
        if logits.shape() != target.shape() {
            return Err(TensorError::Shape {
                op: "critic_loss",
                lhs: logits.shape(),
                rhs: target.shape().to_vec(),
            });
        }
        let graph = logits.graph();
        let log_q = logits.log_softmax()?;
        let cross = log_q.mul(graph.constant(target))?.neg()?;
        let entropy = log_q.exp()?.mul(log_q)?.neg()?;
        let per_row = cross.add(entropy.mul_scalar(ENTROPY_WEIGHT)?)?.sum_cols()?.mean()?;
        total = Some(match total {
            Some(t) => t.add(per_row)?,
            None => per_row,
        });
    }
    let total = total.ok_or(TensorError::Invalid {
        op: "critic_loss",
        reason: "no heads given".into(),
    })?;
    total.mul_scalar(1.0 / pred_logits.len() as f64)
}

/// `0.5 * mean((pred - target)^2)`.
pub fn scalar_bellman_residual<'g>(pred: Var<'g>, target: &Tensor) -> Result<Var<'g>, TensorError> {
    pred.sub(pred.graph().constant(target))?.square()?.mean()?.mul_scalar(0.5)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::autodiff::Graph;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn support_endpoints() {
        let s = ValueSupport::new(101, -3.0, 7.0).unwrap();
        let z = s.atoms();
        assert_eq!(z[0], -3.0);
        assert_eq!(z[100], 7.0);
        assert!(z.windows(2).all(|w| w[1] > w[0]));
        assert!(ValueSupport::new(1, 0.0, 1.0).is_err());
        assert!(ValueSupport::new(3, 1.0, 1.0).is_err());
    }

    #[test]
    fn q_mean_examples() {
        let s = ValueSupport::new(3, -1.0, 1.0).unwrap();
        close(q_mean(&[0.2, 0.3, 0.5], &s), 0.3, 1e-15);
        close(q_mean(&[1.0 / 3.0; 3], &s), 0.0, 1e-15);
        let s = ValueSupport::new(11, 0.0, 10.0).unwrap();
        let mut one_hot = vec![0.0; 11];
        one_hot[5] = 1.0;
        close(q_mean(&one_hot, &s), 5.0, 1e-15);
    }

    #[test]
    fn projection_examples() {
        let s = ValueSupport::new(3, -1.0, 1.0).unwrap();
        let mut out = vec![0.0; 3];
        project(&s, &[0.5], &[1.0], &mut out);
        assert_eq!(out, vec![0.0, 0.5, 0.5]);
        project(&s, &[9.0, -9.0], &[0.25, 0.75], &mut out);
        assert_eq!(out, vec![0.75, 0.0, 0.25]);
    }

    #[test]
    fn zero_discount_collapses_to_reward() {
        let s = ValueSupport::new(5, -2.0, 2.0).unwrap();
        let p = Tensor::full(&[1, 5], 0.2);
        let target = bellman_target(
            &s,
            TargetInputs {
                rewards: &[0.0],
                dones: &[false],
                gamma: 0.0,
                alpha: 1.0,
                next_bound: &[3.0],
            },
            [&p, &p],
        )
        .unwrap();
        assert_eq!(target.data(), &[0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn discount_out_of_range_rejected() {
        let s = ValueSupport::new(5, -2.0, 2.0).unwrap();
        let p = Tensor::full(&[1, 5], 0.2);
        let inputs = TargetInputs {
            rewards: &[0.0],
            dones: &[false],
            gamma: 1.0,
            alpha: 1.0,
            next_bound: &[0.0],
        };
        assert!(bellman_target(&s, inputs, [&p, &p]).is_err());
        assert!(scalar_bellman_target(inputs, [&[0.0], &[0.0]]).is_err());
    }

    #[test]
    fn loss_examples() {
        let g = Graph::new();
        let logits = g.param(&Tensor::zeros(&[1, 2]));
        let target = Tensor::full(&[1, 2], 0.5);
        close(critic_loss(&[logits], &target).unwrap().item(), 0.69661, 1e-5);
        let logits = g.param(&Tensor::row(vec![0.3, -1.2, 2.0]).unwrap());
        let target = Tensor::row(vec![0.0, 1.0, 0.0]).unwrap();
        let probs = softmax_rows(&logits.value());
        let h: f64 = -probs.data().iter().map(|p| p * p.ln()).sum::<f64>();
        close(
            critic_loss(&[logits], &target).unwrap().item(),
            -probs.data()[1].ln() + ENTROPY_WEIGHT * h,
            1e-12,
        );
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let logits = Tensor::matrix(2, 4, vec![0.1, -0.4, 1.3, 0.0, 2.0, -1.0, 0.5, 0.2]).unwrap();
        let target = Tensor::matrix(2, 4, vec![0.1, 0.2, 0.3, 0.4, 0.0, 0.5, 0.5, 0.0]).unwrap();
        let g = Graph::new();
        let x = g.param(&logits);
        let grad = g.backward(critic_loss(&[x], &target).unwrap()).unwrap().wrt(x);
        let eval = |t: &Tensor| {
            let g = Graph::new();
            critic_loss(&[g.constant(t)], &target).unwrap().item()
        };
        let h = 1e-6;
        for i in 0..8 {
            let mut plus = logits.clone();
            plus.data_mut()[i] += h;
            let mut minus = logits.clone();
            minus.data_mut()[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let ad = grad.data()[i];
            assert!((fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-3) < 1e-4);
        }
    }

    #[test]
    fn residual_examples() {
        let g = Graph::new();
        let pred = g.constant_owned(Tensor::column(vec![3.0]).unwrap());
        close(scalar_bellman_residual(pred, &Tensor::column(vec![3.0]).unwrap()).unwrap().item(), 0.0, 0.0);
        close(scalar_bellman_residual(pred, &Tensor::column(vec![1.0]).unwrap()).unwrap().item(), 2.0, 1e-15);
        let pred = g.constant_owned(Tensor::column(vec![1.0, -1.0]).unwrap());
        close(scalar_bellman_residual(pred, &Tensor::column(vec![0.0, 0.0]).unwrap()).unwrap().item(), 0.5, 1e-15);
    }

    fn random_probs(raw: &[f64]) -> Vec<f64> {
        let total: f64 = raw.iter().sum();
        raw.iter().map(|v| v / total).collect()
    }

    proptest! {
        #[test]
        fn projection_conserves_mass_and_mean(
            raw in proptest::collection::vec(0.01f64..1.0, 11),
            r in -1.0f64..1.0,
            gamma in 0.0f64..0.9,
        ) {
            let s = ValueSupport::new(11, -10.0, 10.0).unwrap();
            let probs = random_probs(&raw);
            let values: Vec<f64> = s.atoms().iter().map(|z| r + gamma * z).collect();
            let mut out = vec![0.0; 11];
            project(&s, &values, &probs, &mut out);
            prop_assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(out.iter().all(|p| *p >= 0.0));
            // no atom leaves [-10, 10], so the mean is preserved exactly
            let shifted: f64 = values.iter().zip(&probs).map(|(v, p)| v * p).sum();
            prop_assert!((q_mean(&out, &s) - shifted).abs() < 1e-9);
        }

        #[test]
        fn reward_shift_moves_target_mean(
            raw in proptest::collection::vec(0.01f64..1.0, 21),
            r in -1.0f64..1.0,
            delta in -1.0f64..1.0,
        ) {
            // atoms span [-20, 20]; targets stay inside [-30, 30]
            let s = ValueSupport::new(31, -30.0, 30.0).unwrap();
            let raw: Vec<f64> = [vec![0.0; 5], raw, vec![0.0; 5]].concat();
            let p = Tensor::row(random_probs(&raw)).unwrap();
            let target = |reward: f64| {
                let t = bellman_target(&s, TargetInputs {
                    rewards: &[reward], dones: &[false], gamma: 0.9, alpha: 0.5, next_bound: &[0.3],
                }, [&p, &p]).unwrap();
                q_mean(t.data(), &s)
            };
            prop_assert!((target(r + delta) - target(r) - delta).abs() < 1e-9);
        }

        #[test]
        fn twin_order_does_not_matter(
            a in proptest::collection::vec(0.01f64..1.0, 7),
            b in proptest::collection::vec(0.01f64..1.0, 7),
            r in -5.0f64..5.0,
        ) {
            let s = ValueSupport::new(7, -6.0, 6.0).unwrap();
            let pa = Tensor::row(random_probs(&a)).unwrap();
            let pb = Tensor::row(random_probs(&b)).unwrap();
            let inputs = TargetInputs { rewards: &[r], dones: &[false], gamma: 0.95, alpha: 0.2, next_bound: &[-1.0] };
            prop_assert_eq!(bellman_target(&s, inputs, [&pa, &pb]).unwrap(), bellman_target(&s, inputs, [&pb, &pa]).unwrap());
        }

        #[test]
        fn loss_is_at_least_target_entropy(
            logits in proptest::collection::vec(-3.0f64..3.0, 9),
            raw in proptest::collection::vec(0.01f64..1.0, 9),
        ) {
            let target = random_probs(&raw);
            let h_target: f64 = -target.iter().map(|p| p * p.ln()).sum::<f64>();
            let g = Graph::new();
            let x = g.constant_owned(Tensor::row(logits).unwrap());
            let loss = critic_loss(&[x], &Tensor::row(target).unwrap()).unwrap().item();
            prop_assert!(loss >= h_target - 1e-12);
            prop_assert!(loss >= h_target - ENTROPY_WEIGHT * 9f64.ln());
        }
    }
}
