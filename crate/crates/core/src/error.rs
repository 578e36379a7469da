use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("index {index:?} out of bounds for shape {shape:?}")]
    Index { index: [usize; 4], shape: [usize; 4] },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("construction error: {0}")]
    Construction(String),
    #[error("state error: {0}")]
    State(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("finite-difference oracle error: {0}")]
    Oracle(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
