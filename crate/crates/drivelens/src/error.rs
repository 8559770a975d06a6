//! Crate-wide error type.
//!
//! Errors fall into two families that the CLI maps to exit codes:
//! configuration/validation problems (exit 2) and runtime/data problems
//! (exit 3).

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Invalid configuration or argument validation failure.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset, checkpoint, or other runtime data problem.
    #[error("data error: {0}")]
    Data(String),

    /// Tensor/array shape mismatch.
    #[error("shape error: {0}")]
    Shape(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Process exit code for the CLI: 2 for config/validation, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 3,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
