use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FrontendError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FrontendError {
    #[error("{path}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("unsupported wav header field {field}: {msg}")]
    Header { field: &'static str, msg: String },
    #[error("malformed wav: {0}")]
    Wav(String),
    #[error("audio has {samples} samples, fewer than one {window}-sample window")]
    TooShort { samples: usize, window: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("speed perturbation is not supported")]
    SpeedPerturbUnsupported,
    #[error("feature file: {0}")]
    FeatureFormat(String),
    #[error("transcript line {line}: {msg}")]
    Transcript { line: usize, msg: String },
    #[error(transparent)]
    Core(#[from] mqnet_core::Error),
}

impl FrontendError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
