use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, KiwiError>;

#[derive(Debug, Error)]
pub enum KiwiError {
    #[error("shape mismatch in {op}: {details}")]
    Shape { op: &'static str, details: String },

    #[error("invalid value: {0}")]
    Value(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl KiwiError {
    pub fn shape(op: &'static str, details: impl Into<String>) -> Self {
        KiwiError::Shape {
            op,
            details: details.into(),
        }
    }

    /// CLI exit code: 2 for usage/config problems, 1 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            KiwiError::Config(_) | KiwiError::MissingFile(_) => 2,
            _ => 1,
        }
    }
}
