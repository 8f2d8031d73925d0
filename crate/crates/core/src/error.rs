use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot:e} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("matrix is not symmetric (|a_ij - a_ji| = {deviation:e})")]
    NotSymmetric { deviation: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid transmission sequence: {0}")]
    InvalidSequence(String),

    #[error("degenerate geometry: nodes {a} and {b} are {range:e} m apart")]
    DegenerateGeometry { a: usize, b: usize, range: f64 },

    #[error("no ground-truth position for node {0}")]
    MissingTruth(usize),

    #[error("normal matrix is singular: {0}")]
    SingularNormalMatrix(Box<Error>),

    #[error("iterate left the finite range at outer iteration {0}")]
    NonFiniteIterate(usize),

    #[error("hybrid information matrix is singular: {0}")]
    SingularInformation(Box<Error>),

    #[error("anti-collision constraint violated: min delay {min_delay:e} s <= max range / c = {limit:e} s")]
    Collision { min_delay: f64, limit: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
