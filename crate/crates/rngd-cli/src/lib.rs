//! Command-line harness for the inversion-free Riemannian natural-gradient
//! library: dataset ingestion, experiment configuration, parallel run
//! execution, artifact writing, and self-checks.
//!
//! The `rngd` binary exposes four subcommands:
//!
//! * `run <spec.json>` — execute one experiment spec, writing traces,
//!   a summary, a plot script, and the fully resolved configuration.
//! * `sweep <grid.json>` — run a step-size grid over a base spec.
//! * `check [suite]` — run fast property suites and report pass/fail.
//! * `gen-data <kind> … -o <path>` — generate a synthetic dataset file.
//!
//! Exit codes: `0` success, `1` at least one check failed, `2`
//! configuration error, `3` runtime failure.

pub mod check;
pub mod config;
pub mod data;
pub mod output;
pub mod runner;

use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the harness.
///
/// The variant maps directly onto the process exit code: configuration
/// problems exit `2`, everything else exits `3` (check failures are not
/// errors; the `check` subcommand reports them through its outcome list).
#[derive(Debug, Error)]
pub enum CliError {
    /// The spec, flags, or named resources are invalid.
    #[error("config error: {0}")]
    Config(String),
    /// Dataset ingestion or generation failed.
    #[error(transparent)]
    Data(#[from] data::DataError),
    /// An optimizer or model failure during execution.
    #[error("runtime error: {0}")]
    Runtime(String),
    /// Filesystem failure with the path involved.
    #[error("io error on {path}: {source}")]
    Io {
        /// Path being read or written.
        path: PathBuf,
        /// Underlying error.
        source: std::io::Error,
    },
}

impl CliError {
    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 3,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_split_config_from_runtime() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(CliError::Runtime("x".into()).exit_code(), 3);
        let io = CliError::Io {
            path: PathBuf::from("/nope"),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "gone"),
        };
        assert_eq!(io.exit_code(), 3);
    }
}
