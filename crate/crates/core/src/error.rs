use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("zero marginal: {kind} of location {index} is zero")]
    ZeroMarginal { kind: &'static str, index: usize },

    #[error("own flow of location {0} is zero; welfare change is undefined")]
    ZeroOwnFlow(usize),

    #[error("model evaluation failed: {0}")]
    ModelEvaluationFailed(String),

    #[error("fixed point did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("elasticity must be positive, got {0}")]
    InvalidElasticity(f64),

    #[error("separation: {0}")]
    Separation(String),

    #[error("regressor is collinear with the fixed effects")]
    Collinear,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("covariance matrix is not positive semidefinite")]
    NotPsd,

    #[error("alpha/2 * B = {0} is below one draw")]
    BadQuantileGrid(f64),

    #[error("{failed} of {total} draws failed, above the allowed fraction {max_fraction}")]
    TooManyFailures {
        failed: usize,
        total: usize,
        max_fraction: f64,
    },

    #[error("{draws} draws cannot resolve quantile level {level}")]
    TooFewDraws { draws: usize, level: f64 },

    #[error("rank {rank} exceeds matrix dimension {n}")]
    RankTooLarge { rank: usize, n: usize },

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
