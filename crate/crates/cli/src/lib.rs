//! Operator surface for training runs: configuration files, run directories,
//! oracle verification and multi-run reports.

pub mod commands;
pub mod config;
pub mod outputs;
pub mod report;
pub mod svg;

pub use commands::CliError;
pub use config::{ConfigError, ConfigFile};
