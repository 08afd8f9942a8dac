use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed scene file: {0}")]
    Format(String),

    #[error("malformed image file: {0}")]
    Image(String),

    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("non-finite gradient in parameter family `{0}`")]
    NonFiniteGradient(&'static str),

    #[error("training diverged at iteration {iter}: total loss is {loss}")]
    Diverged { iter: usize, loss: f64 },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}
