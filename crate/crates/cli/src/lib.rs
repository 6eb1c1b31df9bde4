//! Command-line front end: config parsing, subcommand drivers, and the
//! structured run manifest. The binary in `main.rs` is a thin wrapper that
//! maps [`CliError`] variants onto process exit codes.

use std::fmt;
use std::io;

pub mod config;
pub mod manifest;
pub mod runs;

pub use config::{parse_config, RunConfig, Subcommand};
pub use manifest::Manifest;

/// Everything that can end a run early, tagged with its exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad config file or option combination (exit 1).
    Config(config::ConfigError),
    /// Solver-level failure: invalid problem, NaN, dimension mismatch (exit 1).
    Core(nsmc_core::Error),
    /// Artifact I/O failure (exit 1).
    Io(io::Error),
    /// The fixed-point iteration ran out of budget above tolerance (exit 2).
    /// Artifacts for the partial run are still written.
    NonConvergence { kappa: f64, tol: f64 },
    /// One or more validation checks failed (exit 3).
    ValidationFailed { failed: usize, total: usize },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Core(_) | CliError::Io(_) => 1,
            CliError::NonConvergence { .. } => 2,
            CliError::ValidationFailed { .. } => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "{e}"),
            CliError::Core(e) => write!(f, "solver error: {e}"),
            CliError::Io(e) => write!(f, "io error: {e}"),
            CliError::NonConvergence { kappa, tol } => write!(
                f,
                "iteration did not reach tolerance: kappa = {kappa:.4e} > tol = {tol:.4e} \
                 (raise k_max, n_paths, or tol)"
            ),
            CliError::ValidationFailed { failed, total } => {
                write!(f, "validation failed: {failed} of {total} checks")
            }
        }
    }
}

impl std::error::Error for CliError {}

impl From<config::ConfigError> for CliError {
    fn from(e: config::ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl From<nsmc_core::Error> for CliError {
    fn from(e: nsmc_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Io(e)
    }
}
