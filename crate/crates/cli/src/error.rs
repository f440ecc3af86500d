use flowuq::Error as CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// 2 for data problems, 3 when parameters are not identified, 4 when too
    /// many bootstrap draws failed.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) => match e {
                CoreError::TooManyFailures { .. } => 4,
                CoreError::Separation(_)
                | CoreError::Collinear
                | CoreError::InsufficientData(_)
                | CoreError::NotPsd
                | CoreError::NoConvergence { .. }
                | CoreError::TooFewDraws { .. } => 3,
                _ => 2,
            },
            CliError::Config(_) | CliError::Io { .. } => 2,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
