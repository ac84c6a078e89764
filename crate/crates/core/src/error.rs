use std::path::PathBuf;

use thiserror::Error;

/// Everything that can go wrong in the pipeline.
///
/// Variants are grouped into categories (see [`Error::category`]) which the
/// command-line tool maps onto process exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged in phase {phase} at epoch {epoch}")]
    Divergence {
        phase: u8,
        epoch: usize,
        /// Parameters from the last epoch whose loss was finite.
        last_good: Option<Box<crate::network::Checkpoint>>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("fingerprint mismatch for {artifact}: artifact has {found}, config expects {expected}")]
    Fingerprint {
        artifact: String,
        expected: String,
        found: String,
    },

    #[error("bad binary format: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    RawIo(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse error category, used for exit codes and the C interface.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Schema,
    Data,
    Divergence,
    Config,
    Io,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Schema(_) | Error::Format(_) | Error::Csv(_) | Error::Json(_) => {
                ErrorCategory::Schema
            }
            Error::Data(_) | Error::Shape(_) | Error::NonFinite(_) => ErrorCategory::Data,
            Error::Divergence { .. } => ErrorCategory::Divergence,
            Error::Config(_) | Error::Fingerprint { .. } => ErrorCategory::Config,
            Error::Io { .. } | Error::RawIo(_) => ErrorCategory::Io,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            ErrorCategory::Schema => 2,
            ErrorCategory::Data => 3,
            ErrorCategory::Divergence => 4,
            ErrorCategory::Config => 5,
            ErrorCategory::Io => 6,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
