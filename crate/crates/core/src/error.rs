use std::io;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violates an operation precondition.
    #[error("domain error: {0}")]
    Domain(String),

    /// Two arrays that must agree in length or shape do not.
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    /// Non-finite input where a finite value is required.
    #[error("non-finite value at index {0}")]
    NonFinite(usize),

    /// Training or evaluation data only covers one class for a qubit.
    #[error("qubit {qubit} has no shots prepared in state {missing}")]
    SingleClass { qubit: usize, missing: u8 },

    /// A learned quantity collapsed (for example equal class means).
    #[error("degenerate: {0}")]
    Degenerate(String),

    /// Integer accumulator could exceed the 64-bit range.
    #[error("accumulator overflow in {0}")]
    Overflow(String),

    #[error("invalid file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
