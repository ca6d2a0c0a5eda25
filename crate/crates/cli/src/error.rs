use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or an invalid config field.
    #[error("usage error: {0}")]
    Usage(String),
    /// Missing, malformed or mismatched inputs.
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] stochcon_core::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    /// 1 usage, 2 data, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        use stochcon_core::Error as E;
        match self {
            CliError::Usage(_) | CliError::Core(E::Parameter(_)) => 1,
            CliError::Core(E::Numerical { .. } | E::NonFinite(_)) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
