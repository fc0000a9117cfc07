use std::path::{Path, PathBuf};
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    FileFormat { path: PathBuf, msg: String },

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A numeric kernel produced NaN or infinity. `context` names where in the
    /// computation it happened (e.g. an optimization step index).
    #[error("non-finite value in {primitive} ({context})")]
    NonFinite { primitive: &'static str, context: String },

    #[error("degenerate state: {0}")]
    Degenerate(String),

    /// Wraps any error that escapes a pipeline stage so callers see which
    /// stage and outer iteration failed.
    #[error("stage {stage} (iteration {iteration}): {source}")]
    Stage {
        stage: &'static str,
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn file_format(path: impl AsRef<Path>, msg: impl Into<String>) -> Self {
        Error::FileFormat {
            path: path.as_ref().to_path_buf(),
            msg: msg.into(),
        }
    }

    pub fn in_stage(self, stage: &'static str, iteration: usize) -> Self {
        Error::Stage {
            stage,
            iteration,
            source: Box::new(self),
        }
    }
}
