use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("grid too large: {points} points exceeds the cap of {cap}")]
    GridTooLarge { points: usize, cap: usize },

    #[error("kernel is singular on the diagonal (x = y)")]
    DiagonalSingularity,

    #[error("inadmissible kernel: {0}")]
    Divergent(String),

    #[error("quadrature did not converge: {0}")]
    Quadrature(String),

    #[error("no stored grid pair lies within the interpolation bandwidth of the query")]
    Coverage,

    #[error("cell {cell} has pushforward mass {mass:e}, below the positivity floor")]
    ZeroCellMass { cell: usize, mass: f64 },

    #[error("invalid density state: {0}")]
    InvalidState(String),

    #[error("flux field is not antisymmetric (max defect {0:e})")]
    NotAntisymmetric(f64),

    #[error("integrator failure: {0}")]
    Integrator(String),

    #[error("optimizer failure: {0}")]
    Optimizer(String),

    #[error("{0}")]
    Io(String),

    #[error("serialization: {0}")]
    Serialization(String),

    #[error("certificate failed: {0}")]
    Certificate(String),

    #[error("config validation failed at `{path}`: {message}")]
    Validation { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}
