use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("metric undefined: {0}")]
    Undefined(String),

    #[error("{path}:{line}: malformed record: {reason}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable short label for machine-readable diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::InvalidInput(_) => "invalid-input",
            Error::SequenceTooLong { .. } => "sequence-too-long",
            Error::NonFinite { .. } => "non-finite",
            Error::Undefined(_) => "undefined",
            Error::MalformedLine { .. } => "malformed-line",
            Error::Checkpoint(_) => "checkpoint",
            Error::Image(_) => "image",
            Error::Io(_) => "io",
        }
    }
}
