//! Experiment harness around the `unishuffle` library: config files, runs,
//! attacks and the CSV artifacts they leave behind.

pub mod commands;
pub mod config;
pub mod transcript;

pub use commands::{
    cmd_attack, cmd_budget, cmd_loss_curve, cmd_partition_stats, cmd_run, CliError, MetricsRow,
    RunArtifacts,
};
pub use config::{ConfigError, ExperimentConfig, Overrides};
