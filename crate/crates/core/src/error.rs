use std::path::PathBuf;

/// Errors produced by the restoration engine.
#[derive(Debug, thiserror::Error)]
pub enum TnrdError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("degenerate filter: coefficient norm {norm:e} is below {threshold:e}")]
    DegenerateFilter { norm: f64, threshold: f64 },

    #[error("least-squares system is numerically rank deficient (pivot {pivot:e})")]
    NumericalRank { pivot: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = TnrdError> = std::result::Result<T, E>;

impl TnrdError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        TnrdError::InvalidArgument(msg.into())
    }

    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        TnrdError::DimensionMismatch(msg.into())
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        TnrdError::Parse {
            context: context.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TnrdError::Io {
            path: path.into(),
            source,
        }
    }
}
