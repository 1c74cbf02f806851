use std::path::PathBuf;

use omnivore_tensor::TensorError;
use thiserror::Error;

use crate::sample::DatasetId;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("extent {extent} along {axis} is not divisible by patch size {patch}")]
    Indivisible {
        axis: &'static str,
        extent: usize,
        patch: usize,
    },

    #[error("{0}")]
    Contract(String),

    #[error("no head registered for dataset `{0}`")]
    Routing(DatasetId),

    #[error("retrieval: {0}")]
    Retrieval(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("schedule contains no draws")]
    EmptySchedule,

    #[error("non-finite loss {loss} at step {step}")]
    Divergence { step: u64, loss: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format: {0}")]
    Format(String),

    #[error("checkpoint incompatible with model: {}", .0.join("; "))]
    Compatibility(Vec<String>),

    #[error("config field `{field}`: {msg}")]
    Config { field: String, msg: String },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable category name, used for CLI exit diagnostics.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Tensor(_) | Error::Indivisible { .. } | Error::Contract(_) => "contract",
            Error::Routing(_) => "routing",
            Error::Retrieval(_) => "retrieval",
            Error::Degenerate(_) => "degenerate-input",
            Error::EmptySchedule => "empty-schedule",
            Error::Divergence { .. } => "divergence",
            Error::Io { .. } => "io",
            Error::Format(_) => "format",
            Error::Compatibility(_) => "compatibility",
            Error::Config { .. } => "config",
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
