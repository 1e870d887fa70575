//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DeluluError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("wav error: {0}")]
    Wav(String),

    /// Shape or dimension mismatch, naming the operation and both shapes.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Data-level problems: bad manifests, missing labels, malformed files.
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite values or other numeric failure states.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A module contract was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DeluluError>;

impl DeluluError {
    /// Process exit code for the CLI: 3 data, 4 numeric, 5 contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            DeluluError::Io(_) | DeluluError::Wav(_) | DeluluError::Data(_) | DeluluError::Json(_) => 3,
            DeluluError::Numeric(_) => 4,
            DeluluError::Shape { .. } | DeluluError::Contract(_) => 5,
        }
    }

    /// Short machine-parseable code for the `ERROR <code>:` prefix.
    pub fn code(&self) -> &'static str {
        match self {
            DeluluError::Io(_) => "IO",
            DeluluError::Wav(_) => "WAV",
            DeluluError::Shape { .. } => "SHAPE",
            DeluluError::Data(_) => "DATA",
            DeluluError::Numeric(_) => "NUMERIC",
            DeluluError::Contract(_) => "CONTRACT",
            DeluluError::Json(_) => "JSON",
        }
    }
}
