//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension mismatch in a tensor primitive. Names the
    /// primitive and the offending shapes.
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A numeric precondition failed (non-positive temperature, NaN
    /// logits, zero-norm vector, invalid one-hot row, ...).
    #[error("{0}")]
    Invalid(String),

    /// backward() called on a non-scalar, or twice on the same graph.
    #[error("backward: {0}")]
    Backward(String),

    /// Training aborted on a non-finite loss.
    #[error("non-finite loss at step {step} (parameter checksum {checksum:#018x})")]
    NonFiniteLoss { step: u64, checksum: u64 },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset file: {0}")]
    DatasetFile(String),

    #[error("unknown recipe `{0}` (expected one of fig2, table4, table5, table6, table10, fig3, table3)")]
    UnknownRecipe(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
