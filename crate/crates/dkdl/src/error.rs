use std::path::{Path, PathBuf};

use crate::mat::MatError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Mat { path: PathBuf, source: MatError },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {source}")]
    Checkpoint { path: PathBuf, source: dkdl_core::Error },
    #[error(transparent)]
    Core(#[from] dkdl_core::Error),
    #[error("data error: {0}")]
    Data(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss is {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io { path: path.to_owned(), source }
    }

    pub fn json(path: &Path, source: serde_json::Error) -> Self {
        Error::Json { path: path.to_owned(), source }
    }

    /// Process exit status for the command line: 1 usage, 2 data, 3 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Divergence { .. } => 3,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
