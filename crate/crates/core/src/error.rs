use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Missing or inconsistent configuration (e.g. a dynamic agent without a control).
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed or out-of-contract input values.
    #[error("input error: {0}")]
    Input(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    /// Scene log stream could not be decoded.
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    /// No valid adversary spawn point; the rollout is discarded.
    #[error("scenario skipped: {0}")]
    ScenarioSkip(String),

    /// Clip cannot be turned into a counterfactual pair.
    #[error("corruption skipped: {0}")]
    CorruptionSkip(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }
}
