use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("frame dimensions {rows}x{cols} out of range 1..=100")]
    DimensionOutOfRange { rows: usize, cols: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: String, found: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("backward called without a recorded forward trace")]
    NoTrace,
    #[error("recording has {len} samples, at least {needed} required")]
    TooShortRecording { len: usize, needed: usize },
    #[error("recording timestamps must be strictly increasing (sample {index})")]
    NonMonotonicTimestamps { index: usize },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),
    #[error("multiplier {0} outside the open interval (0, 1)")]
    InvalidMultiplier(f64),
    #[error("quantized model is not calibrated: {0}")]
    Uncalibrated(&'static str),
    #[error("invalid world: {0}")]
    InvalidWorld(String),
    #[error("window not ready: {pushed} of {needed} frames")]
    NotReady { pushed: usize, needed: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(&'static str),
}
