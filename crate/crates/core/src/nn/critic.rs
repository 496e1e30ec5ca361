//! Twin critic heads with batch renormalization and no target network.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BatchRenorm, Bound, Linear, Params, RenormConfig, RenormStats};
use crate::autodiff::{concat_cols, concat_rows, Graph, Var};
use crate::error::TensorError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriticConfig {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub hidden: usize,
    /// Logit count per head; 1 means a plain scalar head.
    pub outputs: usize,
    pub renorm: RenormConfig,
}

/// One head: `(s, a) -> [Linear -> BRN -> relu] x 2 -> Linear`.
#[derive(Debug, Clone)]
pub struct CriticHead {
    pub params: Params,
    layers: [Linear; 3],
    norms: [BatchRenorm; 2],
}

impl CriticHead {
    fn new<R: Rng + ?Sized>(config: &CriticConfig, prefix: &str, rng: &mut R) -> Self {
        let mut params = Params::new();
        let input = config.obs_dim + config.act_dim;
        let l0 = Linear::new(&mut params, &format!("{prefix}.0"), input, config.hidden, rng);
        let n0 = BatchRenorm::new(&mut params, &format!("{prefix}.bn0"), config.hidden, config.renorm);
        let l1 = Linear::new(&mut params, &format!("{prefix}.1"), config.hidden, config.hidden, rng);
        let n1 = BatchRenorm::new(&mut params, &format!("{prefix}.bn1"), config.hidden, config.renorm);
        let l2 = Linear::new(&mut params, &format!("{prefix}.2"), config.hidden, config.outputs, rng);
        Self {
            params,
            layers: [l0, l1, l2],
            norms: [n0, n1],
        }
    }

    fn forward_train<'g>(&self, bound: &Bound<'g>, x: Var<'g>) -> Result<(Var<'g>, [RenormStats; 2]), TensorError> {
        let (h, s0) = self.norms[0].forward_train(bound, self.layers[0].forward(bound, x)?)?;
        let (h, s1) = self.norms[1].forward_train(bound, self.layers[1].forward(bound, h.relu()?)?)?;
        Ok((self.layers[2].forward(bound, h.relu()?)?, [s0, s1]))
    }

    fn forward_eval<'g>(&self, bound: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>, TensorError> {
        let h = self.norms[0].forward_eval(bound, self.layers[0].forward(bound, x)?)?;
        let h = self.norms[1].forward_eval(bound, self.layers[1].forward(bound, h.relu()?)?)?;
        self.layers[2].forward(bound, h.relu()?)
    }

    pub fn stats(&self) -> [&RenormStats; 2] {
        [&self.norms[0].stats, &self.norms[1].stats]
    }

    pub fn stats_mut(&mut self) -> [&mut RenormStats; 2] {
        let [a, b] = &mut self.norms;
        [&mut a.stats, &mut b.stats]
    }

    pub fn set_stats(&mut self, stats: [RenormStats; 2]) {
        let [s0, s1] = stats;
        self.norms[0].stats = s0;
        self.norms[1].stats = s1;
    }
}

#[derive(Debug, Clone)]
pub struct CriticNetwork {
    pub config: CriticConfig,
    pub heads: [CriticHead; 2],
}

/// Per-head outputs of a joint current/next forward.
#[derive(Debug)]
pub struct JointOutput<'g> {
    /// Logits for the current batch, differentiable.
    pub current: [Var<'g>; 2],
    /// Logits for the next batch, gradient-stopped.
    pub next: [Var<'g>; 2],
    /// Running statistics after this step, per head.
    pub stats: [[RenormStats; 2]; 2],
}

/// Per-head outputs of an evaluation-mode forward.
#[derive(Debug)]
pub struct CriticOutput<'g> {
    pub heads: [Var<'g>; 2],
}

impl CriticNetwork {
    pub fn new<R: Rng + ?Sized>(config: CriticConfig, rng: &mut R) -> Self {
        let heads = [
            CriticHead::new(&config, "critic.q0", rng),
            CriticHead::new(&config, "critic.q1", rng),
        ];
        Self { config, heads }
    }

    pub fn bind<'g>(&self, graph: &'g Graph, trainable: bool) -> [Bound<'g>; 2] {
        [self.heads[0].params.bind(graph, trainable), self.heads[1].params.bind(graph, trainable)]
    }

    fn check(&self, state: Var<'_>, action: Var<'_>) -> Result<(), TensorError> {
        let (sr, sc) = state.dims2();
        let (ar, ac) = action.dims2();
        if sc != self.config.obs_dim || ac != self.config.act_dim || sr != ar || sr == 0 {
            return Err(TensorError::Shape {
                op: "critic_forward",
                lhs: state.shape(),
                rhs: action.shape(),
            });
        }
        Ok(())
    }

    /// Queries current and next pairs in one normalization batch; the next
    /// outputs are detached so they can serve as targets.
    pub fn forward_joint<'g>(
        &self,
        bound: &[Bound<'g>; 2],
        current: (Var<'g>, Var<'g>),
        next: (Var<'g>, Var<'g>),
    ) -> Result<JointOutput<'g>, TensorError> {
        self.check(current.0, current.1)?;
        self.check(next.0, next.1)?;
        let rows = current.0.dims2().0;
        let total = rows + next.0.dims2().0;
        let x = concat_rows(&[concat_cols(&[current.0, current.1])?, concat_cols(&[next.0, next.1])?])?;
        let mut cur = Vec::with_capacity(2);
        let mut nxt = Vec::with_capacity(2);
        let mut stats = Vec::with_capacity(2);
        for (head, b) in self.heads.iter().zip(bound) {
            let (logits, s) = head.forward_train(b, x)?;
            cur.push(logits.slice_rows(0, rows)?);
            nxt.push(logits.slice_rows(rows, total)?.stop_gradient());
            stats.push(s);
        }
        let [s0, s1]: [[RenormStats; 2]; 2] = stats.try_into().expect("two heads");
        Ok(JointOutput {
            current: [cur[0], cur[1]],
            next: [nxt[0], nxt[1]],
            stats: [s0, s1],
        })
    }

    pub fn forward_eval<'g>(&self, bound: &[Bound<'g>; 2], state: Var<'g>, action: Var<'g>) -> Result<CriticOutput<'g>, TensorError> {
        self.check(state, action)?;
        let x = concat_cols(&[state, action])?;
        Ok(CriticOutput {
            heads: [self.heads[0].forward_eval(&bound[0], x)?, self.heads[1].forward_eval(&bound[1], x)?],
        })
    }

    pub fn commit_stats(&mut self, stats: [[RenormStats; 2]; 2]) {
        let [a, b] = stats;
        self.heads[0].set_stats(a);
        self.heads[1].set_stats(b);
    }
}
