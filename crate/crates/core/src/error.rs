use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration field is out of its allowed range.
    #[error("config field `{field}`: {message}")]
    Config { field: &'static str, message: String },

    /// Tensor shapes do not line up.
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    /// A value violated a data invariant (label out of range, non-finite tensor, ...).
    #[error("validation failed in {context}: {message}")]
    Validation {
        context: &'static str,
        message: String,
    },

    /// A training step produced a non-finite loss; parameters were not updated.
    #[error("non-finite loss at step {step}: sup={sup} st={st} ss={ss}")]
    NonFiniteLoss { step: u64, sup: f64, st: f64, ss: f64 },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("dataset file {path}: {message}")]
    DatasetFile { path: PathBuf, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(field: &'static str, message: impl Into<String>) -> Self {
        Error::Config {
            field,
            message: message.into(),
        }
    }

    pub fn validation(context: &'static str, message: impl Into<String>) -> Self {
        Error::Validation {
            context,
            message: message.into(),
        }
    }

    pub fn shape(
        context: &'static str,
        expected: impl Into<String>,
        actual: impl Into<String>,
    ) -> Self {
        Error::Shape {
            context,
            expected: expected.into(),
            actual: actual.into(),
        }
    }
}
