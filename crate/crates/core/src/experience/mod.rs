//! Replay storage and the environment suite.

mod buffer;
mod envs;

pub use buffer::{Batch, ReplayBuffer, Transition};
pub use envs::{
    make, rollout, wrap_angle, write_trace, Bandit, EnvSpec, Environment, Pendulum, PointMass, StepResult, TraceRow,
    ENVIRONMENTS,
};
