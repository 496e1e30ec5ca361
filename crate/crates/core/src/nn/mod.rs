//! Parameterized function approximators and their parameter plumbing.

mod batch_renorm;
pub mod checkpoint;
mod critic;
mod optim;
mod score;

pub use batch_renorm::{BatchRenorm, RenormConfig, RenormStats};
pub use critic::{CriticConfig, CriticHead, CriticNetwork, CriticOutput, JointOutput};
pub use optim::{Adam, AdamConfig};
pub use score::{fourier_features, ScoreConfig, ScoreNetwork};

use rand::Rng;

use crate::autodiff::{Graph, Gradients, Var};
use crate::error::TensorError;
use crate::tensor::Tensor;

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    entries: Vec<(String, Tensor)>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor and returns its slot index.
    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.entries.push((name.into(), value));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, index: usize) -> &Tensor {
        &self.entries[index].1
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.entries[index].1
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.entries
            .iter()
            .map(|(_, t)| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Registers every tensor as a leaf of `graph`. Non-trainable bindings
    /// produce constants, so no gradient flows into them.
    pub fn bind<'g>(&self, graph: &'g Graph, trainable: bool) -> Bound<'g> {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| if trainable { graph.param(t) } else { graph.constant(t) })
            .collect();
        Bound { vars }
    }

    /// Replaces the value of a named entry, checking its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<(), TensorError> {
        let slot = self
            .entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .ok_or_else(|| TensorError::Invalid {
                op: "params.set",
                reason: format!("no parameter named `{name}`"),
            })?;
        if slot.1.shape() != value.shape() {
            return Err(TensorError::Shape {
                op: "params.set",
                lhs: slot.1.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        slot.1 = value;
        Ok(())
    }
}

/// Graph leaves for a [`Params`] collection, in the same order.
#[derive(Debug, Clone)]
pub struct Bound<'g> {
    vars: Vec<Var<'g>>,
}

impl<'g> Bound<'g> {
    pub fn var(&self, index: usize) -> Var<'g> {
        self.vars[index]
    }

    pub fn vars(&self) -> &[Var<'g>] {
        &self.vars
    }

    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|v| grads.wrt(*v)).collect()
    }
}

/// Slot indices of a fully connected layer inside a [`Params`] collection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Uniform `±1/sqrt(fan_in)` initialization for weight and bias.
    pub fn new<R: Rng + ?Sized>(params: &mut Params, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let weight = params.push(format!("{name}.weight"), Tensor::uniform(&[fan_in, fan_out], bound, rng));
        let bias = params.push(format!("{name}.bias"), Tensor::uniform(&[1, fan_out], bound, rng));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn zeros(params: &mut Params, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = params.push(format!("{name}.weight"), Tensor::zeros(&[fan_in, fan_out]));
        let bias = params.push(format!("{name}.bias"), Tensor::zeros(&[1, fan_out]));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<'g>(&self, bound: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>, TensorError> {
        x.affine(bound.var(self.weight), bound.var(self.bias))
    }
}
