use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AppError {
    #[error("{0}")]
    Core(#[from] aqvq_core::Error),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("cannot read {path}: {source}")]
    MissingInput {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error in {context}: {message}")]
    Format { context: String, message: String },
    #[error("{context}: parse error at line {line}, column {column}: {message}")]
    Parse { context: String, line: usize, column: usize, message: String },
    #[error("incompatible checkpoint format version {found} (this build reads version {expected})")]
    Version { found: u64, expected: u64 },
}

pub type AppResult<T> = std::result::Result<T, AppError>;

impl AppError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AppError::Io { path: path.into(), source }
    }

    pub fn format(context: impl Into<String>, message: impl Into<String>) -> Self {
        AppError::Format { context: context.into(), message: message.into() }
    }

    pub fn parse(context: impl Into<String>, e: &serde_json::Error) -> Self {
        AppError::Parse { context: context.into(), line: e.line(), column: e.column(), message: e.to_string() }
    }

    /// Process exit code: 1 for configuration and usage problems, 2 for
    /// runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Config(_) | AppError::MissingInput { .. } => 1,
            AppError::Core(aqvq_core::Error::Config(_)) => 1,
            _ => 2,
        }
    }
}
