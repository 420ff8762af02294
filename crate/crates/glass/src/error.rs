use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GlassError {
    #[error("{0}")]
    Core(#[from] glass_core::Error),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = GlassError> = std::result::Result<T, E>;

impl GlassError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        GlassError::Io { path: path.to_path_buf(), source }
    }

    pub fn parse(path: &Path, line: usize, msg: impl Into<String>) -> Self {
        GlassError::Parse { path: path.to_path_buf(), line, msg: msg.into() }
    }

    /// Process exit status: 2 configuration, 3 data, 4 divergence.
    pub fn exit_code(&self) -> i32 {
        use glass_core::Error as E;
        match self {
            GlassError::Config(_) | GlassError::Core(E::Config(_)) | GlassError::Core(E::Parameter(_)) => 2,
            GlassError::Core(E::Divergence(_)) => 4,
            _ => 3,
        }
    }
}
