//! Error type shared by every module in the crate.

use thiserror::Error;

/// Errors raised by estimation routines.
///
/// Solver non-convergence is deliberately *not* an error: estimators return
/// a flagged result so that repeated-trial studies can tally failures
/// instead of aborting.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    /// Shapes or block layouts do not conform: wrong vector length, wrong
    /// number of auxiliary sources, non-symmetric weight matrix, ...
    #[error("structural error: {0}")]
    Structure(String),
    /// A numeric input was NaN or infinite.
    #[error("domain error: {0}")]
    Domain(String),
    /// The call itself is invalid: empty dataset, bad confidence level,
    /// fold without enough labeled rows, ...
    #[error("usage error: {0}")]
    Usage(String),
    /// The target parameter cannot be identified from the data
    /// (rank-deficient design, too few labeled rows, singular Gram matrix).
    #[error("identification error: {0}")]
    Identification(String),
    /// Moment blocks are exactly collinear; a required Schur complement
    /// is singular.
    #[error("degenerate moments: {0}")]
    DegenerateMoments(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn structure(msg: impl Into<String>) -> Self {
        Error::Structure(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn identification(msg: impl Into<String>) -> Self {
        Error::Identification(msg.into())
    }

    pub fn degenerate(msg: impl Into<String>) -> Self {
        Error::DegenerateMoments(msg.into())
    }
}
