//! Crate-wide error type and result alias.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SacoError {
    /// Bad arguments, malformed config, out-of-range ids.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Matrix/sequence dimensions that do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Non-finite values, zero-norm vectors, diverged losses.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Dataset/manifest problems (missing files, truncated blobs).
    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl SacoError {
    /// Process exit code the CLI maps this error to: 1 for validation
    /// problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            SacoError::InvalidInput(_) | SacoError::ShapeMismatch(_) | SacoError::Data(_) => 1,
            SacoError::Numerical(_) | SacoError::Io(_) | SacoError::Json(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, SacoError>;
