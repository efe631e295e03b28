//! Error type shared by all modules.

use thiserror::Error;

/// Errors reported by the laboratory's numerical kernels.
#[derive(Debug, Error)]
pub enum Error {
    /// A scalar parameter lies outside its mathematical domain.
    #[error("{what} = {value} out of range (expected {expected})")]
    Domain {
        what: &'static str,
        value: f64,
        expected: &'static str,
    },

    /// Operands live on different grids or have incompatible shapes.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    /// A composition schedule is malformed or too short for the request.
    #[error("invalid schedule: {0}")]
    Schedule(String),

    /// A function failed a cone-membership requirement.
    #[error("cone violation: {0}")]
    Cone(String),

    /// An invalid argument that is not a plain domain violation.
    #[error("invalid argument: {0}")]
    Invalid(String),

    /// A computation broke down numerically (division floors, NaNs, ...).
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
