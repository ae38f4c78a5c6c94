use thiserror::Error;

/// Errors raised anywhere in the training laboratory.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("non-finite gradient during {0}")]
    NonFiniteGradient(&'static str),

    #[error("unknown width factor {0}")]
    UnknownWidth(f64),

    #[error("lambda {0} outside [0, 1]")]
    LambdaOutOfRange(f64),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("IDX parse error at byte {offset}: {reason}")]
    Idx { offset: usize, reason: String },

    #[error("I/O error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
