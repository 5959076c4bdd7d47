use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// One offending field of an experiment configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {what} at index {index}: {value}")]
    InvalidEntry {
        what: &'static str,
        index: usize,
        value: f64,
    },
    #[error("entitlements sum to {0}, expected 1")]
    EntitlementSum(f64),
    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("estimation error: {0}")]
    Estimation(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("incompatible configuration: {0}")]
    Incompatible(String),
    #[error("invalid configuration:\n{}", join_fields(.0))]
    Config(Vec<FieldError>),
    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", .path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("mixed inputs: {0}")]
    Mixed(String),
}

impl Error {
    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidEntry { .. }
                | Error::EntitlementSum(_)
                | Error::LengthMismatch { .. }
                | Error::InvalidArgument(_)
                | Error::Domain(_)
                | Error::Incompatible(_)
                | Error::Config(_)
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }
}

fn join_fields(errors: &[FieldError]) -> String {
    errors
        .iter()
        .map(|e| format!("  {e}"))
        .collect::<Vec<_>>()
        .join("\n")
}
