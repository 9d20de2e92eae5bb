use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand dimensions are incompatible for an operation.
    #[error("{op}: {operand} has incompatible dims: {detail}")]
    Shape {
        op: &'static str,
        operand: String,
        detail: String,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("malformed tensor file: {0}")]
    Format(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    /// Non-finite loss during training.
    #[error("{stage} diverged at step {step}")]
    Divergence { stage: &'static str, step: usize },

    #[error("missing checkpoint for stage `{stage}` at {}", path.display())]
    MissingCheckpoint { stage: &'static str, path: PathBuf },
}

impl Error {
    pub(crate) fn shape(op: &'static str, operand: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            operand: operand.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    /// Process exit code used by the CLI: 3 for divergence, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence { .. } => 3,
            _ => 2,
        }
    }
}
