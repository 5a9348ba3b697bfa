//! Experiment driver behind the `vqprompt` binary.

pub mod commands;
pub mod config;

pub use commands::{cmd_generate, cmd_pretrain, cmd_report, cmd_run, cmd_sweep, RunSummary};
pub use config::{ExperimentConfig, RunMode};
