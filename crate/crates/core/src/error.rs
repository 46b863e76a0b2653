use std::path::PathBuf;

/// Errors raised by the dlink library.
#[derive(Debug, thiserror::Error)]
pub enum DlinkError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("incompatible feature dimensions: {0}")]
    Incompatible(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Divergence {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, DlinkError>;

impl DlinkError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DlinkError::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for DlinkError {
    fn from(e: serde_json::Error) -> Self {
        DlinkError::Serde(e.to_string())
    }
}
