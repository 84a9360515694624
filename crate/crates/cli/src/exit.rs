//! Process exit codes.

use std::fmt;
use std::process::ExitCode;

use molgrad::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Validation = 1,
    Numerical = 2,
    Io = 3,
}

#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub message: String,
}

impl Failure {
    pub fn validation(message: impl Into<String>) -> Self {
        Failure {
            kind: Kind::Validation,
            message: message.into(),
        }
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        Failure {
            kind: Kind::Numerical,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Failure {
            kind: Kind::Io,
            message: message.into(),
        }
    }

    pub fn code(&self) -> ExitCode {
        ExitCode::from(self.kind as u8)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let kind = match &e {
            Error::Invalid(_) | Error::Shape { .. } | Error::Unsupported(_) | Error::CapExceeded { .. } => {
                Kind::Validation
            }
            Error::Domain { .. } | Error::NonFiniteLoss { .. } | Error::Diverged { .. } | Error::Singular(_) => {
                Kind::Numerical
            }
            Error::Parse { .. } | Error::Io { .. } | Error::Csv(_) => Kind::Io,
        };
        Failure {
            kind,
            message: e.to_string(),
        }
    }
}
