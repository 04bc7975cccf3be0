use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation's contract (shape mismatch, nonpositive
    /// variance, out-of-range coordinate, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A dataset record or manifest could not be read or parsed.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// A configuration value is invalid or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// Training produced a non-finite value; names the offending term.
    #[error("training diverged at stage {stage}, step {step}: non-finite `{term}`")]
    Diverged {
        stage: String,
        step: u64,
        term: String,
    },

    /// Checkpoint serialization / deserialization failure.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn dataset(msg: impl Into<String>) -> Self {
        Error::Dataset(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
