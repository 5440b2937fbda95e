//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not conform for the requested operation.
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    /// Argument outside its documented domain (dropout rate, non-scalar loss, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Question tokenized to nothing.
    #[error("question tokenized to an empty sequence")]
    EmptyQuestion,

    /// Every ground-truth answer fell outside the answer vocabulary. Trainers
    /// treat this as "skip the example", not as a failure.
    #[error("no in-vocabulary answers for this example")]
    EmptyAnswers,

    /// Operation applied to a value in the wrong state (e.g. double normalization).
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// Malformed binary file. `offset` is the byte position of the defect.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Malformed dataset record.
    #[error("invalid record: {0}")]
    InvalidRecord(String),

    /// Bad configuration (unknown key, unparsable value, inconsistent sizes).
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint could not be loaded.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training produced a non-finite loss; the message carries the step dump.
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
