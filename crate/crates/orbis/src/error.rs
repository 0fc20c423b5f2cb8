use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Matrix or map dimensions do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A value that must be finite was NaN or infinite.
    #[error("non-finite value at token {token}, channel {channel}")]
    NonFinite { token: usize, channel: usize },

    /// A parameter violated its documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A token index fell outside `[0, n_tokens)`.
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    /// A `TokenPairSet` violated one of its structural invariants.
    #[error("invalid pair set: {0}")]
    InvalidPairSet(String),

    /// A schedule violated the FC/RC reuse-window rules.
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    /// A hardware configuration table entry is missing or unusable.
    #[error("invalid hardware config: {0}")]
    InvalidHardwareConfig(String),

    #[error("malformed file: {0}")]
    MalformedFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
