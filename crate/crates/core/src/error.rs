use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, hyper-parameters or network topology do not fit together.
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller-supplied values are out of range (labels, fold indices, fractions).
    #[error("input error: {0}")]
    Input(String),

    /// Training-mode batch normalization over a single value per channel.
    #[error("degenerate batch statistics: {0}")]
    DegenerateStatistics(String),

    /// A dataset tree could not be ingested.
    #[error("ingestion error in {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    /// Loss or parameters became non-finite during training.
    #[error("numeric divergence: {0}")]
    Divergence(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {reason}")]
    Image { path: PathBuf, reason: String },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 for configuration/input problems, 2 for I/O and
    /// data problems, 3 for numeric divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Input(_) | Error::DegenerateStatistics(_) => 1,
            Error::Ingestion { .. }
            | Error::Checkpoint(_)
            | Error::Io { .. }
            | Error::Image { .. } => 2,
            Error::Divergence(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
