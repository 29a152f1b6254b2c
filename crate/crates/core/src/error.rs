use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid model dimensions: {0}")]
    InvalidDims(String),

    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },

    #[error("cache footprint overflows u64")]
    FootprintOverflow,

    #[error("frame {got} does not follow frame {last} already in layer {layer}")]
    FrameRegression { layer: usize, last: u64, got: u64 },

    #[error("expected {expected} tokens for frame, got {got}")]
    TokenCount { expected: usize, got: usize },

    #[error("token {slot} has width {got}, expected {expected}")]
    TokenWidth { slot: usize, expected: usize, got: usize },

    #[error("tokens of one frame carry mixed frame indices ({first} and {other})")]
    MixedFrame { first: u64, other: u64 },

    #[error("non-finite value at slot {slot}")]
    NonFinite { slot: usize },

    #[error("kernel size must be odd and positive, got {0}")]
    EvenKernel(usize),

    #[error("gaussian sigma must be positive and finite, got {0}")]
    BadSigma(f64),

    #[error("coefficient `{name}` = {value} is outside [0, 1]")]
    OutOfUnitRange { name: &'static str, value: f64 },

    #[error("budget {budget} is below the protected set size {protected}")]
    BudgetBelowProtected { budget: usize, protected: usize },

    #[error("total budget {total} is {deficit} tokens short of the per-layer floors")]
    InfeasibleBudget { total: usize, deficit: usize },

    #[error("score vector has length {got}, expected {expected}")]
    ScoreLength { expected: usize, got: usize },

    #[error("expected frame {expected}, got {got}")]
    FrameIndexMismatch { expected: u64, got: u64 },

    #[error("malformed frame input: {0}")]
    MalformedFrame(String),
}
