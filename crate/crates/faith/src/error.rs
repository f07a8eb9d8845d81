//! Crate-wide error type. Module-specific failures carry their own enums
//! and convert into [`Error`] at the boundaries.

use thiserror::Error;

use crate::data::DataError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Contract { op, msg: msg.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
