use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node `{node}`: {detail}")]
    ShapeMismatch { node: String, detail: String },

    #[error("non-finite activation at node `{node}`, batch index {batch}")]
    NonFinite { node: String, batch: usize },

    #[error("non-finite gradient: {0}")]
    NonFiniteGradient(String),

    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),

    #[error("no supervised pixels")]
    NoSupervisedPixels,

    #[error("single-class scores")]
    SingleClassScores,

    #[error("insufficient positives: need at least {needed}, got {got}")]
    InsufficientPositives { needed: usize, got: usize },

    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("missing artifact: {0}")]
    Missing(String),

    #[error("{path}: {source}")]
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

    /// Coarse category used by the command line to choose an exit code.
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::Parse { .. } => ErrorCategory::BadInput,
            Error::Missing(_) => ErrorCategory::MissingArtifact,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                ErrorCategory::MissingArtifact
            }
            Error::NonFinite { .. }
            | Error::NonFiniteGradient(_)
            | Error::Diverged { .. }
            | Error::NoSupervisedPixels
            | Error::SingleClassScores
            | Error::InsufficientPositives { .. }
            | Error::TooFewSamples { .. } => ErrorCategory::Numeric,
            _ => ErrorCategory::BadInput,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    BadInput,
    MissingArtifact,
    Numeric,
}
