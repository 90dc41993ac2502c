//! Command-line experiment runner for the POD prediction cascade.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{
    cmd_classify, cmd_evaluate, cmd_gradcheck, cmd_pipeline, cmd_preprocess, cmd_pretrain, cmd_sweep, cmd_synth,
    gradcheck_report, Outcome, SweepKind,
};
pub use config::{ExperimentConfig, Overrides};
pub use error::{CliError, CliResult};
