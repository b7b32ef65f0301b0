//! Error and result types shared across the toolkit.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GcError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite values produced by {0}")]
    NonFinite(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("tokenizer: {0}")]
    Tokenizer(String),
    #[error("container: {0}")]
    Container(String),
    #[error("graph: {0}")]
    Graph(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl GcError {
    /// Exit code the CLI maps this error to: 1 for validation problems
    /// (bad arguments, configs, or data), 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            GcError::InvalidConfig(_) | GcError::InvalidInput(_) | GcError::ShapeMismatch { .. } => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, GcError>;
