use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("loss has no non-pad positions")]
    EmptyLoss,

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("unknown domain label `{0}`")]
    UnknownLabel(String),

    #[error("sequence of length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid regime: {0}")]
    Regime(String),

    #[error("synthetic spec requests {requested} unique sentences for `{domain}` but only {available} exist")]
    SpaceExhausted {
        domain: String,
        requested: u128,
        available: u128,
    },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("vocabulary fingerprint mismatch: checkpoint has {expected}, vocabulary has {actual}")]
    FingerprintMismatch { expected: String, actual: String },

    #[error("malformed {what}: {detail}")]
    Format { what: String, detail: String },

    #[error("output directory {0} is not empty (use --force to overwrite)")]
    OutputNotEmpty(PathBuf),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
