use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DecoderError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("{path}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: character {ch:?} is not in the vocabulary")]
    OutOfVocabulary { line: usize, ch: char },
    #[error("vocabulary: {0}")]
    Vocabulary(String),
    #[error("language model: {0}")]
    Lm(String),
    #[error("arpa line {line}: {msg}")]
    Arpa { line: usize, msg: String },
    #[error("beam width must be at least 1")]
    ZeroBeam,
    #[error("log-probabilities cover {got} labels but the vocabulary has {expected}")]
    VocabMismatch { expected: usize, got: usize },
    #[error("reference transcript is empty")]
    EmptyReference,
}

impl DecoderError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
