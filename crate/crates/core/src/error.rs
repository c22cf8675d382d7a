use thiserror::Error;

use crate::numerics::NumericsError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("request has no candidates")]
    EmptyCandidates,
    #[error("{what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid slate: {0}")]
    InvalidSlate(String),
    #[error("cannot fill {m} positions from {n} candidates")]
    Infeasible { m: usize, n: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("line {line}: {msg}")]
    Data { line: usize, msg: String },
    /// Unreadable or malformed input that has no line number.
    #[error("{0}")]
    Input(String),
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("{0} is undefined for these labels")]
    UndefinedMetric(&'static str),
    #[error("numeric failure: {0}")]
    NumericFailure(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
