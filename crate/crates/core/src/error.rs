use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum WsdfError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("numerically degenerate input: {0}")]
    Degenerate(String),
    #[error("argument outside domain: {0}")]
    Domain(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error("parse error in {}: {msg}", path.display())]
    Parse { path: PathBuf, msg: String },
    #[error("i/o error on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl WsdfError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        WsdfError::Io { path: path.into(), source }
    }

    pub fn parse(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        WsdfError::Parse { path: path.into(), msg: msg.into() }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            WsdfError::Config(_) => 2,
            WsdfError::Numerical(_) => 4,
            _ => 3,
        }
    }
}

pub type Result<T, E = WsdfError> = std::result::Result<T, E>;
