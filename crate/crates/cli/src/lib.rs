//! Command-line harness for fractional dilated convolutions: dataset
//! materialization, training, evaluation, gradient checks, dilation export and
//! the fixed-versus-learned ablation.

pub mod ablation;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod train;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
