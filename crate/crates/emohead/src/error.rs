use std::path::PathBuf;

use emohead_core::train::TrainError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Unrecognized header: wrong magic, version or dtype.
    #[error("format error: {0}")]
    Format(String),
    /// Header or payload length inconsistent with the declared shape.
    #[error("corrupt tensor file: {0}")]
    Corruption(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Invalid configuration; nothing has been written.
    #[error("invalid config: {0}")]
    Config(String),
    /// Invalid dataset or prediction input.
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Core(#[from] emohead_core::Error),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
