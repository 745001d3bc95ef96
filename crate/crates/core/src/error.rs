//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An input value lies outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A kernel specification fails validation (e.g. nonpositive bandwidth).
    #[error("invalid kernel spec: {0}")]
    InvalidKernel(String),

    /// Field/grid/matrix dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Every cell of a field is missing, so nothing can be imputed.
    #[error("cannot impute: all cells are missing")]
    AllMissing,

    /// A regression design is rank deficient.
    #[error("singular design: {0}")]
    SingularDesign(String),

    /// An iterative fit failed to converge.
    #[error("did not converge: {0}")]
    NonConvergence(String),

    /// Linear algebra failed in a way the priors should have prevented.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// The requested operation is not available for these inputs.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// A file could not be parsed; carries file, line and column context.
    #[error("parse error in {file} at line {line}: {message}")]
    Parse {
        file: String,
        line: u64,
        message: String,
    },

    /// Configuration or input validation failure.
    #[error("invalid input: {0}")]
    Validation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
