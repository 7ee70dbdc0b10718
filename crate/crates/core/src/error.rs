use thiserror::Error;

/// Crate-wide error type. Variants map onto process exit codes: usage and
/// parameter problems exit 3, failed checks exit 2, broken internal
/// contracts exit 4.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller violated an operation precondition (wrong dimension, box out
    /// of window, unoccupied walk start, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// A model or ladder parameter is outside its admissible range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// An enabled check evaluated to "fail" (not an implementation bug).
    #[error("check failed: {0}")]
    CheckFailed(String),

    /// A mathematical contract that should hold by construction was
    /// violated; indicates an implementation bug or corrupted artifact.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Iterative solver did not reach the requested residual.
    #[error("solver did not converge: {0}")]
    Solver(String),

    /// Integer overflow while extending a scale ladder.
    #[error("overflow: {0}")]
    Overflow(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI (0 is success and never produced here).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::CheckFailed(_) => 2,
            Error::Usage(_) | Error::Parameter(_) | Error::Parse(_) | Error::Io(_) => 3,
            Error::Contract(_) | Error::Solver(_) | Error::Overflow(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}

pub(crate) fn parameter(msg: impl Into<String>) -> Error {
    Error::Parameter(msg.into())
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
