//! Crate-wide error type. Variants map onto the failure classes the CLI
//! distinguishes: usage problems, bad data, and numerical breakdown.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied parameter violates its documented domain.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Input data is structurally valid but unusable (e.g. too few visible
    /// joints, degenerate geometry).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A text format failed to parse; `line` is 1-based.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A record or container violates the documented schema.
    #[error("schema error: {0}")]
    Schema(String),

    /// Persisted data carries an unsupported format or version marker.
    #[error("version mismatch: {0}")]
    Version(String),

    /// A computation produced non-finite values or failed to converge.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
