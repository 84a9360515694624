use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {context}")]
    Domain { context: &'static str },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("unsupported network variant: {0}")]
    Unsupported(&'static str),

    #[error("dense size {size} exceeds cap {cap}")]
    CapExceeded { size: usize, cap: usize },

    #[error("non-finite loss at epoch {epoch} (batch samples {batch:?})")]
    NonFiniteLoss { epoch: usize, batch: Vec<usize> },

    #[error("solver produced a non-finite iterate at iteration {iteration}")]
    Diverged {
        iteration: usize,
        trace: Box<crate::pnp::SolveTrace>,
    },

    #[error("singular system: {0}")]
    Singular(&'static str),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: usize, got: usize) -> Self {
        Error::Shape {
            context,
            expected,
            got,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::shape(context, expected, got))
    }
}
