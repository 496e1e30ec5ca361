//! Score network `f(s, a^n, n)` driving the denoising chain.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Bound, Linear, Params};
use crate::autodiff::{concat_cols, Var};
use crate::error::{Error, TensorError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreConfig {
    pub obs_dim: usize,
    pub act_dim: usize,
    /// Trunk width.
    pub hidden: usize,
    /// Number of sin/cos frequency pairs for the step encoding.
    pub fourier_pairs: usize,
    /// Width of the step-embedding network's hidden layer.
    pub time_hidden: usize,
    /// Output size of the step embedding, concatenated to the trunk input.
    pub time_embed: usize,
    /// Number of diffusion steps `N`; valid step indices are `0..N`.
    pub steps: usize,
}

/// `[sin(w_k t), cos(w_k t)]` with `w_k` geometric in `[1, 1000]`.
pub fn fourier_features(t: f64, pairs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * pairs);
    for k in 0..pairs {
        let w = if pairs > 1 {
            1000f64.powf(k as f64 / (pairs - 1) as f64)
        } else {
            1.0
        };
        out.push((w * t).sin());
    }
    for k in 0..pairs {
        let w = if pairs > 1 {
            1000f64.powf(k as f64 / (pairs - 1) as f64)
        } else {
            1.0
        };
        out.push((w * t).cos());
    }
    out
}

#[derive(Debug, Clone)]
pub struct ScoreNetwork {
    pub config: ScoreConfig,
    pub params: Params,
    time_in: Linear,
    time_out: Linear,
    trunk: [Linear; 3],
    features: Vec<Tensor>,
}

impl ScoreNetwork {
    /// Random init with a zero final layer, so a fresh network outputs 0.
    pub fn new<R: Rng + ?Sized>(config: ScoreConfig, rng: &mut R) -> Self {
        let mut params = Params::new();
        let time_in = Linear::new(&mut params, "score.time.0", 2 * config.fourier_pairs, config.time_hidden, rng);
        let time_out = Linear::new(&mut params, "score.time.1", config.time_hidden, config.time_embed, rng);
        let input = config.obs_dim + config.act_dim + config.time_embed;
        let trunk = [
            Linear::new(&mut params, "score.trunk.0", input, config.hidden, rng),
            Linear::new(&mut params, "score.trunk.1", config.hidden, config.hidden, rng),
            Linear::zeros(&mut params, "score.trunk.2", config.hidden, config.act_dim),
        ];
        let features = (0..config.steps)
            .map(|step| {
                let t = (step + 1) as f64 / config.steps as f64;
                Tensor::from_parts(vec![1, 2 * config.fourier_pairs], fourier_features(t, config.fourier_pairs))
            })
            .collect();
        Self {
            config,
            params,
            time_in,
            time_out,
            trunk,
            features,
        }
    }

    /// Score at diffusion step index `step ∈ 0..N` for a batch of states and
    /// noisy actions.
    pub fn forward<'g>(&self, bound: &Bound<'g>, state: Var<'g>, action: Var<'g>, step: usize) -> Result<Var<'g>, Error> {
        if step >= self.config.steps {
            return Err(Error::StepOutOfRange {
                step,
                limit: self.config.steps,
            });
        }
        let (rows, act) = action.dims2();
        let (state_rows, obs) = state.dims2();
        if act != self.config.act_dim || obs != self.config.obs_dim || state_rows != rows {
            return Err(TensorError::Shape {
                op: "score_forward",
                lhs: state.shape(),
                rhs: action.shape(),
            }
            .into());
        }
        let graph = action.graph();
        let feats = graph.constant(&self.features[step]);
        let emb = self.time_in.forward(bound, feats)?.gelu()?;
        let emb = self.time_out.forward(bound, emb)?.broadcast_rows(rows)?;
        let x = concat_cols(&[state, action, emb])?;
        let h = self.trunk[0].forward(bound, x)?.gelu()?;
        let h = self.trunk[1].forward(bound, h)?.gelu()?;
        Ok(self.trunk[2].forward(bound, h)?)
    }
}
