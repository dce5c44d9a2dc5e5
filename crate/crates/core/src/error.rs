//! Error taxonomy shared by the whole toolkit.

use thiserror::Error;

/// Errors raised by model, attack, and I/O code.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration (shape mismatches against the
    /// configured model, bad hyperparameters, malformed config files).
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid argument to an operation (out-of-range timestep, bad token
    /// index, non-divisible block size, ...).
    #[error("argument error: {0}")]
    Argument(String),

    /// Numeric failure: non-finite values encountered where finiteness is
    /// required (diverging training, NaN gradients).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Operation called on an object in the wrong state (e.g. untrained
    /// classifier).
    #[error("state error: {0}")]
    State(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 1 usage/config, 2 I/O, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Argument(_) | Error::State(_) => 1,
            Error::Io(_) | Error::Image(_) | Error::Json(_) => 2,
            Error::Numeric(_) => 3,
        }
    }
}
