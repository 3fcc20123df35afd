//! Experiment runner for continual post-training: configuration files,
//! sequence runs with artifacts, result tables, protection checks and
//! synthetic data export.

pub mod commands;
pub mod config;
pub mod error;
pub mod run;
pub mod table;

pub use commands::{cmd_gen_data, cmd_verify};
pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
pub use run::{cmd_run, run_experiment, RunOptions, RunOutcome};
pub use table::cmd_table;
