//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Structurally invalid input data (shape mismatch, bad cell, bad exposure).
    #[error("invalid data: {0}")]
    InvalidData(String),

    /// A parameter is outside its admissible range.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A value is outside the support of the requested distribution.
    #[error("domain violation: {0}")]
    Domain(String),

    /// An iterative routine exhausted its budget without meeting its tolerance.
    #[error("did not converge: {0}")]
    NonConvergence(String),

    /// A matrix that must be invertible (or PD) is numerically singular.
    #[error("singular matrix: {0}")]
    Singular(String),

    /// All particle weights vanished; the filter cannot continue.
    #[error("particle filter degenerated: {0}")]
    Degenerate(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
