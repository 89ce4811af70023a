//! Crate-wide error type.

use crate::trainer::Checkpoint;

/// Unified error for every fallible operation in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not line up for an operation.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// An operation produced NaN or infinity.
    #[error("non-finite values produced by {op}")]
    NonFinite { op: String },

    /// A precondition on an argument was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A covariance matrix lost positive definiteness.
    #[error("covariance matrix is not positive definite{}", context_suffix(.context))]
    NotPositiveDefinite { context: String },

    /// Attempted gradient update to frozen parameters.
    #[error("parameters are frozen: {0}")]
    Frozen(String),

    /// Training loss became non-finite; the checkpoint holds the last
    /// finite state.
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged {
        epoch: usize,
        last_finite: Box<Checkpoint>,
    },

    /// File format version does not match what this build reads.
    #[error("unsupported file version {found:?} (expected {expected:?})")]
    VersionMismatch { found: String, expected: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

fn context_suffix(context: &str) -> String {
    if context.is_empty() {
        String::new()
    } else {
        format!(" ({context})")
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Shorthand for [`Error::InvalidArgument`] with formatted text.
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
