//! Error type shared by every module in the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition or type invariant was violated by the caller.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A fitting basis lost full rank; `index` is the offending basis row.
    #[error("rank deficient basis (row {index}): {detail}")]
    RankDeficient { index: usize, detail: String },

    /// A matrix that must be symmetric positive definite failed to factor.
    #[error("matrix not positive definite: {0}")]
    NotPositiveDefinite(String),

    /// A problem exceeds the desk-scale guard built into an operation.
    #[error("{what} = {actual} exceeds limit {limit}")]
    SizeGuard {
        what: String,
        actual: usize,
        limit: usize,
    },

    /// Text input (CSV or config) could not be parsed; `line` is 1-based.
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Process exit code classification: 1 validation error, 2 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::RankDeficient { .. } | Error::NotPositiveDefinite(_) => 2,
            _ => 1,
        }
    }
}
