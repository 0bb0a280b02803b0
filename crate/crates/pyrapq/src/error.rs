//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Array extents do not compose (matrix/vector dimension mismatch).
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A hyperparameter or argument is outside its legal range.
    #[error("invalid parameter: {0}")]
    Param(String),

    /// Input data violates a contract (negative activations, NaN, ...).
    #[error("invalid input: {0}")]
    Input(String),

    /// A backward pass was requested without a matching forward cache.
    #[error("invalid state: {0}")]
    State(String),

    /// A computation produced or consumed a non-finite value.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// File does not start with the expected magic bytes.
    #[error("bad magic in {0}")]
    BadMagic(String),

    /// File declares a format version this build does not understand.
    #[error("unsupported format version {found} in {path} (expected {expected})")]
    Version {
        path: String,
        found: u32,
        expected: u32,
    },

    /// File ended before the declared payload was complete.
    #[error("truncated file: {0}")]
    Truncated(String),

    /// Stored dimensions disagree with the manifest declaration.
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("parse error: {0}")]
    Parse(String),

    /// Training aborted on a non-finite loss; names the offending batch.
    #[error("training diverged: {0}")]
    Diverged(String),

    /// Evaluation could not be carried out (no valid query, empty index, ...).
    #[error("evaluation error: {0}")]
    Eval(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
