use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the reconstruction library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("reflection ambiguity: recovered scale {0} is not positive")]
    ReflectionAmbiguity(f64),

    #[error("numerical failure in `{term}`: value {value}")]
    NumericalFailure { term: String, value: f64 },

    #[error("unsupported operation in gradient graph: {0}")]
    UnsupportedOp(String),

    #[error("insufficient views: need at least {needed}, have {have}")]
    InsufficientViews { needed: usize, have: usize },

    #[error("triangulated point lies at infinity (w = {0:e})")]
    PointAtInfinity(f64),

    #[error("format error in `{field}`: {reason}")]
    Format { field: String, reason: String },

    #[error("unsupported {kind} version {found} (supported: {supported})")]
    UnsupportedVersion {
        kind: &'static str,
        found: u32,
        supported: u32,
    },

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("training diverged at epoch {epoch}: {source}")]
    Diverged {
        epoch: usize,
        #[source]
        source: Box<Error>,
        /// Parameters from the last epoch that finished with a finite loss.
        last_good: Box<crate::neural_prior::DictionaryStack>,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn format(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
