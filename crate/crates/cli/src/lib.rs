//! Command-line driver: configuration, training, sampling, evaluation and
//! the baseline and IMM experiments.

pub mod baselines;
pub mod config;
pub mod error;
pub mod eval;
pub mod imm;
pub mod io;
pub mod sample;
pub mod train;

pub use error::{CliError, CliResult};
