//! Crate-wide error type.
//!
//! Every fallible operation in this crate returns [`Result`]. The variants
//! distinguish the broad failure classes a caller may want to branch on:
//! I/O, malformed files, bad arguments, data that fails a validation rule,
//! problem sizes we refuse to attempt, and numerical breakdown during
//! training or optimization.

use std::path::PathBuf;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// The error type shared by all modules.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An underlying I/O operation failed.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but its bytes do not match the expected format
    /// (bad magic number, truncated payload, wrong version string, ...).
    #[error("format error: {0}")]
    Format(String),

    /// Text content failed to parse (CSV cells, TOML, JSON report lines).
    #[error("parse error: {0}")]
    Parse(String),

    /// An argument violated a documented precondition.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Data was well-formed but violated a semantic rule
    /// (feature out of [0, 1], label count mismatch, empty dataset, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// A configuration file was readable but inconsistent or incomplete.
    #[error("config error: {0}")]
    Config(String),

    /// The requested problem size exceeds a hard guard and is refused
    /// rather than attempted.
    #[error("problem too large: {0}")]
    Scale(String),

    /// Model training diverged (non-finite loss or weights).
    #[error("training failed: {0}")]
    Training(String),

    /// An iterative numerical routine broke down (non-finite gradient,
    /// QP solver out of iterations, ...).
    #[error("optimizer failure: {0}")]
    Optimizer(String),
}

impl Error {
    /// Helper for wrapping an I/O error with the offending path.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
