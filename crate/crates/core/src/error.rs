use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An argument lies outside the domain an operation is defined on.
    #[error("domain error: {0}")]
    Domain(String),
    /// Arrays, grids or ensembles that must agree in size do not.
    #[error("shape error: {0}")]
    Shape(String),
    /// A functional or derivative produced a non-finite number.
    #[error("non-finite value at sample {index}: {context}")]
    NonFinite { index: usize, context: String },
    /// A fixed-point iteration failed to reach its tolerance.
    #[error("no convergence after {iterations} iterations (gaps: {gaps:?})")]
    NoConvergence { iterations: usize, gaps: Vec<f64> },
    /// A preset or configuration constraint is violated.
    #[error("invalid problem: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}

pub(crate) fn shape<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
