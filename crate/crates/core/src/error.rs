use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or image dimensions do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// The API was called in a way its contract forbids.
    #[error("usage error: {0}")]
    Usage(String),

    /// Loss or activations stopped being finite.
    #[error("non-finite loss at epoch {epoch}, batch {batch} (lr {lr:e}): {detail}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        lr: f64,
        detail: String,
    },

    /// Malformed or inconsistent dataset contents.
    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),

    #[error("image codec error for {path}: {message}")]
    Codec { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}
