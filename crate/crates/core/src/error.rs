use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io: {0}")]
    Io(#[from] io::Error),

    /// Malformed or inconsistent input data (images, grids, token streams).
    #[error("data: {0}")]
    Data(String),

    /// Shape or dimension contract violated.
    #[error("shape: {0}")]
    Shape(String),

    #[error("config: {0}")]
    Config(String),

    /// Checkpoint framing, integrity or compatibility failure.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// Non-finite loss during training; carries the batch-local sample index.
    #[error("numeric: non-finite loss at sample {sample}: {detail}")]
    NonFinite { sample: usize, detail: String },
}

impl Error {
    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn checkpoint(msg: impl Into<String>) -> Self {
        Error::Checkpoint(msg.into())
    }
}
