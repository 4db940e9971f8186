use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent grids, bad sizes, invalid run settings.
    #[error("configuration error: {0}")]
    Config(String),

    /// An argument outside the admissible range of a mathematical operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    /// A search whose end points do not bracket a change of behaviour.
    #[error("inconclusive: {0}")]
    Inconclusive(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
