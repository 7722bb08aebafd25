//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An input violated an operation's precondition (shape mismatch,
    /// out-of-range argument, non-finite value, ...).
    #[error("rejected input: {0}")]
    RejectedInput(String),

    /// Not enough data to perform the requested fit (e.g. fewer points
    /// than clusters).
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// An internal contract was violated by the caller (e.g. backward
    /// from a non-scalar node).
    #[error("contract violation: {0}")]
    ContractViolation(String),

    /// A computation produced a non-finite value.
    #[error("numeric fault: {0}")]
    NumericFault(String),

    /// A time-dependent quantity was requested at a degenerate time.
    #[error("degenerate time: {0}")]
    DegenerateTime(String),

    /// A metric is undefined for the given inputs (e.g. AUC with a
    /// single class).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// A data or model file could not be parsed.
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// A file carried an unsupported format version.
    #[error("unsupported format version in {path}: expected {expected}, got {got}")]
    FormatVersion {
        path: String,
        expected: u32,
        got: u32,
    },

    /// Invalid run configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for CLI use: 2 for config errors, 3 for
    /// numeric faults, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::NumericFault(_) => 3,
            _ => 1,
        }
    }
}
