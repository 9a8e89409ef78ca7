use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AppError {
    #[error(transparent)]
    Core(#[from] ltsm_diff_core::Error),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{path}: row {row}, column `{column}`: {message}")]
    Parse { path: PathBuf, row: usize, column: String, message: String },

    #[error("{0}")]
    Data(String),

    #[error("archive: {0}")]
    Archive(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = AppError> = std::result::Result<T, E>;

impl AppError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AppError::Io { path: path.into(), source }
    }

    /// 2 for problems with what the user asked for, 1 for failures while
    /// doing it.
    pub fn exit_code(&self) -> i32 {
        use ltsm_diff_core::Error as E;
        match self {
            AppError::Config(_) | AppError::Usage(_) | AppError::Data(_) | AppError::Parse { .. } => 2,
            AppError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
            AppError::Core(E::Config(_) | E::InvalidArgument(_) | E::Weights(_)) => 2,
            _ => 1,
        }
    }
}
