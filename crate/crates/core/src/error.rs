use thiserror::Error;

pub type Result<T> = std::result::Result<T, DiceError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiceError {
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),

    #[error("token {token} at position {position} is outside the alphabet of size {alphabet}")]
    TokenOutOfRange {
        position: usize,
        token: usize,
        alphabet: usize,
    },

    #[error("empty token sequence")]
    EmptySequence,

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("log floor {0} must be finite and at most -60")]
    InvalidFloor(f64),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("step {step} is outside 1..={max}")]
    StepOutOfRange { step: usize, max: usize },

    #[error("normalized time {0} is outside [0, 1]")]
    TimeOutOfRange(f64),

    #[error("clean data never contains the mask token (position {0})")]
    MaskInCleanData(usize),

    #[error("x_t = {x_t} is unreachable from x_0 = {x0} at step {step}")]
    InconsistentPair { step: usize, x_t: usize, x0: usize },

    #[error("denoiser row {row} is not normalized (probability mass {mass})")]
    Unnormalized { row: usize, mass: f64 },

    #[error("observation has zero likelihood under every component for condition {0}")]
    ZeroLikelihood(String),

    #[error("unknown condition label {0}")]
    UnknownCondition(u32),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid edit parameters: {0}")]
    InvalidParams(String),

    #[error("record family mismatch: record is {record}, operation expects {expected}")]
    FamilyMismatch {
        record: &'static str,
        expected: &'static str,
    },

    #[error("schedule fingerprint mismatch: record {record:#018x}, supplied {supplied:#018x}")]
    ScheduleMismatch { record: u64, supplied: u64 },

    #[error("malformed record: {0}")]
    MalformedRecord(String),

    #[error("degenerate estimate: {0}")]
    Degenerate(String),

    #[error("parse error: {0}")]
    Parse(String),
}
