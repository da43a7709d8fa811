use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },
    #[error("{op}: reduction over an empty time axis")]
    EmptyAxis { op: &'static str },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("gradient check: f is not finite at coordinate {index} (offset {offset:e})")]
    NonFiniteProbe { index: usize, offset: f64 },
    #[error("gradient check: {0}")]
    GradCheck(String),
    #[error("ctc: target of length {target_len} needs at least {required} frames, got {frames}")]
    CtcInfeasible {
        target_len: usize,
        required: usize,
        frames: usize,
    },
    #[error("ctc: total path probability underflowed")]
    CtcUnderflow,
    #[error("ctc: {0}")]
    Ctc(String),
    #[error("config: row {row}: {field}: {msg}")]
    Config {
        row: String,
        field: &'static str,
        msg: String,
    },
    #[error("config: {0}")]
    ConfigParse(String),
    #[error("parameter {0} is not registered")]
    UnknownParam(String),
    #[error("{0}")]
    Model(String),
}

impl Error {
    pub(crate) fn config(row: impl Into<String>, field: &'static str, msg: impl Into<String>) -> Self {
        Error::Config {
            row: row.into(),
            field,
            msg: msg.into(),
        }
    }
}
