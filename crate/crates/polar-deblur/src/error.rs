//! Crate-wide error type and process exit-code mapping.

use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two images or maps that must share dimensions do not.
    #[error("shape mismatch in {context}: {expected_h}x{expected_w} vs {got_h}x{got_w}")]
    ShapeMismatch {
        context: &'static str,
        expected_h: usize,
        expected_w: usize,
        got_h: usize,
        got_w: usize,
    },

    /// An input value violates a mathematical precondition.
    #[error("domain error: {0}")]
    Domain(String),

    /// A configuration file or key is invalid.
    #[error("config error: {0}")]
    Config(String),

    /// An on-disk artifact is missing or inconsistent.
    #[error("integrity error at {path}: {reason}")]
    Integrity { path: PathBuf, reason: String },

    /// A binary container (checkpoint, report) is malformed.
    #[error("format error: {0}")]
    Format(String),

    /// Training produced a non-finite loss.
    #[error("training diverged in phase {phase} at step {step} (loss {loss})")]
    Divergence { phase: u32, step: u64, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 usage/config, 3 data integrity,
    /// 4 divergence, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Domain(_) | Error::ShapeMismatch { .. } => 2,
            Error::Integrity { .. } | Error::Format(_) | Error::Io(_) => 3,
            Error::Divergence { .. } => 4,
        }
    }

    pub(crate) fn integrity(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Integrity {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
