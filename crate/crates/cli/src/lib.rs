//! Command-line workflows: synthetic data, training, reconstruction, the
//! triangulation baseline, noise comparisons and evaluation.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{
    cmd_compare, cmd_eval, cmd_reconstruct, cmd_synth, cmd_train, cmd_triangulate, compare_table, evaluate, run,
    CompareColumn, CompareTable, Evaluation,
};
pub use config::{Cli, Command, RunArgs, RunConfig, SweepConfig};
pub use error::{CliError, CliResult};
