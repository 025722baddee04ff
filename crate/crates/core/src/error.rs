use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Inputs whose shapes disagree (a caller bug rather than bad data).
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid data: {0}")]
    Data(String),
    /// The null fit cannot support the requested restriction (tied means, empty interval).
    #[error("degenerate restriction: {0}")]
    Degenerate(String),
    #[error("did not converge: {0}")]
    NonConvergence(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;
