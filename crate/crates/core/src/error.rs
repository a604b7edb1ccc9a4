use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the library. Each variant maps to one CLI exit code.
#[derive(Debug, Error)]
pub enum CfcError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("line {line}: {message}")]
    MalformedLine { line: usize, message: String },

    #[error("record `{id}`: missing required field `{field}`")]
    MissingField { id: String, field: String },

    #[error("record `{id}`: {message}")]
    InvalidRecord { id: String, message: String },

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("solver failure in {method}: {message}")]
    Solver { method: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl CfcError {
    pub fn domain(msg: impl Into<String>) -> Self {
        CfcError::Domain(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CfcError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            CfcError::Io { .. } => 2,
            CfcError::Solver { .. } => 3,
            CfcError::Schema(_)
            | CfcError::MissingField { .. }
            | CfcError::MalformedLine { .. }
            | CfcError::InvalidRecord { .. }
            | CfcError::Json(_) => 4,
            CfcError::Domain(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CfcError>;
