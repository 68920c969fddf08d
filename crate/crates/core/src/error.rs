use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid box ({x1}, {y1}, {x2}, {y2}): corners must satisfy x2 > x1 and y2 > y1")]
    DegenerateBox { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("invalid pyramid spec: {0}")]
    InvalidSpec(String),

    #[error("angle {0} outside the encodable range [-99, 99)")]
    AngleOutOfRange(f64),

    #[error("backward called before forward")]
    NoForwardCache,

    #[error("classification selection is empty")]
    EmptySelection,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged { epoch: usize, step: usize, detail: String },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
