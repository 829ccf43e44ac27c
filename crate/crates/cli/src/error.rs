use std::path::PathBuf;

use thiserror::Error;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] mvprior::Error),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        use mvprior::Error as E;
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io { .. } | CliError::Json { .. } => EXIT_DATA,
            CliError::Core(e) => match e {
                E::Degenerate(_)
                | E::ReflectionAmbiguity(_)
                | E::NumericalFailure { .. }
                | E::PointAtInfinity(_)
                | E::UnsupportedOp(_)
                | E::Diverged { .. } => EXIT_NUMERICAL,
                _ => EXIT_DATA,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
