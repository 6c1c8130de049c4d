//! Config-driven experiment commands behind the `cmim` binary.

pub mod commands;
pub mod config;

pub use commands::{cmd_ablate, cmd_eval, cmd_gen_data, cmd_train};
pub use config::ExperimentConfig;
