//! One error type for the whole core crate.

use alloc::string::String;

/// Errors surfaced by core operations. IO-side errors live in `apd-lab`.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("length mismatch for {what}: {left} vs {right}")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("temperature must be finite and positive, got {0}")]
    BadTemperature(f64),

    #[error("hyper-LM extrapolation requires T > 1, got {0}")]
    HlmTemperature(f64),

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("family needs at least {need} members, got {got}")]
    FamilyTooSmall { need: usize, got: usize },

    #[error("member {index} has {params} parameters, not above the previous member's {prev}")]
    SizesNotIncreasing {
        index: usize,
        params: usize,
        prev: usize,
    },

    #[error("training diverged: non-finite loss in member {member} at step {step}")]
    Diverged { member: usize, step: usize },

    #[error("training diverged: non-finite loss in batch {batch} (step {step})")]
    TrainingNan { batch: usize, step: usize },

    #[error("probability outside [0, 1]: {0}")]
    BadProbability(f64),

    #[error("invalid value for {name}: {value}")]
    BadParam { name: &'static str, value: f64 },

    #[error("trace record {ctx_id}: {msg}")]
    BadTrace { ctx_id: u64, msg: &'static str },

    #[error("family hash mismatch: traces carry {traces:#018x}, family is {family:#018x}")]
    HashMismatch { traces: u64, family: u64 },

    #[error("curve fit failed: {0}")]
    FitFailed(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = core::result::Result<T, Error>;
