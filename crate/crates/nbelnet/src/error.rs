//! Error type shared by the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes of inputs do not agree.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A parameter violates its documented invariant.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A linear predictor left the numerically safe range (|x'b| > 700)
    /// or an intermediate quantity turned non-finite.
    #[error("domain error: {0}")]
    Domain(String),

    /// A matrix handed to a cone search is not symmetric nonnegative-definite.
    #[error("matrix is not symmetric positive semidefinite: {0}")]
    NotPsd(String),

    /// Degenerate input (zero column, zero regressor, empty support, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A theory bound does not apply at the given parameters; carries the
    /// offending value and its admissible limit.
    #[error("bound inapplicable: tau = {tau} exceeds (1/2)e^-1 = {limit}")]
    BoundInapplicable { tau: f64, limit: f64 },

    /// Unknown replication experiment name.
    #[error("unknown experiment: {0}")]
    UnknownExperiment(String),
}
