use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("timestep {t} out of range for a schedule of {len} steps")]
    TimestepOutOfRange { t: usize, len: usize },

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),

    #[error("degenerate schedule value at timestep {t}: {what}")]
    Degenerate { t: usize, what: &'static str },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("unknown class id {0}")]
    UnknownClass(usize),

    #[error("class {0} has no samples")]
    EmptyClass(usize),

    #[error("empty batch")]
    EmptyBatch,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("class maps differ: {0}")]
    ClassMapMismatch(String),
}
