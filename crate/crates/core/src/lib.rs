//! Maximum-entropy actor-critic with a denoising diffusion policy, built on a
//! small reverse-mode tensor engine.

pub mod autodiff;
pub mod critic;
pub mod diffusion;
pub mod error;
pub mod experience;
pub mod nn;
pub mod objective;
pub mod oracles;
pub mod tensor;
pub mod trainer;

pub use critic::ValueSupport;
pub use diffusion::{DiffusionPolicy, NoiseSchedule, ScheduleConfig};
pub use error::{Error, Result, TensorError};
pub use experience::{make, EnvSpec, Environment, ReplayBuffer, Transition};
pub use nn::{RenormConfig, ScoreNetwork};
pub use objective::{TemperatureConfig, TemperatureSign};
pub use oracles::{CheckRow, Suite};
pub use tensor::Tensor;
pub use trainer::{
    evaluate, train, train_with, AbortSnapshot, Agent, CriticMode, EvalRecord, EvalStats, Observer, RunMetrics, ScoreWidths,
    TrainOutcome, TrainerConfig,
};
