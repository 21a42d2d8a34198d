use std::io;
use std::path::{Path, PathBuf};

/// Failures surfaced by the pipeline, each mapped to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Checkpoint(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Model(#[from] macmd_core::Error),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

impl PipelineError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Data(_) | Self::Io { .. } => 3,
            Self::Checkpoint(_) => 4,
            Self::Model(macmd_core::Error::Config(_)) => 2,
            Self::Model(_) => 3,
        }
    }
}
