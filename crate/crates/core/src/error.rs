use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid frame: {0}")]
    InvalidFrame(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(&'static str),

    #[error("state index {index} out of range (at most {max})")]
    StateOutOfRange { index: usize, max: usize },

    #[error("numerical collapse: every candidate state has zero posterior mass")]
    NumericalCollapse,
}

impl Error {
    /// True for failures caused by floating-point degeneracy rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NotPositiveDefinite(_) | Error::NumericalCollapse)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
