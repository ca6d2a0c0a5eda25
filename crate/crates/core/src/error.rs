use thiserror::Error;

/// Errors raised anywhere in the core library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Shapes or axes that do not fit together.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// An input outside an operation's mathematical domain (e.g. log of a non-positive value).
    #[error("domain error: {0}")]
    Domain(String),
    /// A caller broke an API contract (non-scalar backward, unpaired anchor, ...).
    #[error("contract error: {0}")]
    Contract(String),
    /// A hyperparameter out of its valid range.
    #[error("parameter error: {0}")]
    Parameter(String),
    /// A forward computation produced NaN or infinity.
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    /// Training diverged at a given optimizer step.
    #[error("numerical failure at step {step}: {reason}")]
    Numerical { step: u64, reason: String },
    /// Malformed binary container or dataset file.
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
