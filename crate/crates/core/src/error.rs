use std::path::PathBuf;

use thiserror::Error;

/// Failures raised by tensor construction and graph operations.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not match {len} values")]
    Length { shape: Vec<usize>, len: usize },
    #[error("tensors of rank > 2 are not supported (shape {shape:?})")]
    Rank { shape: Vec<usize> },
    #[error("{op}: non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("{op}: {reason}")]
    Invalid { op: &'static str, reason: String },
    #[error("backward needs a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("diffusion step {step} out of range 0..{limit}")]
    StepOutOfRange { step: usize, limit: usize },
    #[error("kernel index {n} outside 1..={steps}")]
    KernelIndex { n: usize, steps: usize },
    #[error("diffusion chain diverged at step {step}: {source}")]
    ChainDiverged { step: usize, source: TensorError },
    #[error("replay buffer holds {size} transitions, {requested} requested")]
    InsufficientData { size: usize, requested: usize },
    #[error("transition rejected: {0}")]
    InvalidTransition(String),
    #[error("unknown environment `{0}`")]
    UnknownEnvironment(String),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("oracle: {0}")]
    Oracle(String),
    #[error("training aborted: {0}")]
    Aborted(Box<crate::trainer::AbortSnapshot>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
