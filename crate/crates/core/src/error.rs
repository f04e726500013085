use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("decode error: identifier {0:?} is not in the index")]
    Decode(Vec<usize>),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("state error: {0}")]
    State(String),

    #[error("reward error: {0}")]
    Reward(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing prerequisite {path}: {hint}")]
    MissingArtifact { path: PathBuf, hint: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable category, used for CLI exit diagnostics.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Parse { .. } => "parse",
            Error::Decode(_) => "decode",
            Error::Lookup(_) => "lookup",
            Error::State(_) => "state",
            Error::Reward(_) => "reward",
            Error::Training(_) => "training",
            Error::Checkpoint(_) => "checkpoint",
            Error::MissingArtifact { .. } => "missing-artifact",
            Error::Io { .. } => "io",
            Error::Serde(_) => "serde",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
