use thiserror::Error;

/// Errors raised by the core library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid world spec: {0}")]
    InvalidSpec(String),
    #[error("illegal action {action} in state {state}")]
    IllegalAction { state: u32, action: String },
    #[error("episode already finished")]
    EpisodeFinished,
    #[error("reward component unset at step {0}")]
    RewardUnset(usize),
    #[error("step index {index} out of range for trajectory of length {len}")]
    StepOutOfRange { index: usize, len: usize },
    #[error("inadmissible augmented action: {0}")]
    Inadmissible(String),
    #[error("zero probability under the old policy")]
    ZeroOldProbability,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("node budget of {0} exceeded during enumeration")]
    NodeBudgetExceeded(u64),
    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("corrupt encoding: {0}")]
    Encoding(String),
}

pub type Result<T> = std::result::Result<T, Error>;
