use thiserror::Error;

/// Errors produced anywhere in the alignment laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("prompt {0} is not part of the environment")]
    PromptNotFound(u32),
    #[error("prefix of length {len} is too long for responses of length {max}")]
    PrefixTooLong { len: usize, max: usize },
    #[error("token {token} is out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("response has length {got}, expected {expected}")]
    ResponseLength { got: usize, expected: usize },
    #[error("temperature must be non-negative, got {0}")]
    InvalidTemperature(f64),
    #[error("enumeration of {size} responses exceeds the budget of {budget}")]
    EnumerationTooLarge { size: u128, budget: u128 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid preference weight: {0}")]
    InvalidWeight(String),
    #[error("invalid environment: {0}")]
    InvalidEnv(String),
    #[error("non-finite parameter at index {0}")]
    NonFiniteParameter(usize),
    #[error("invalid reward spec `{name}`: {reason}")]
    InvalidRewardSpec { name: String, reason: String },
    #[error("objective {objective} assigns equal reward to both responses")]
    TiedPreference { objective: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset generation stalled after {attempts} rejected draws")]
    GenerationStalled { attempts: usize },
    #[error("insufficient pool: need {needed} {stratum} instances, have {available}")]
    InsufficientPool {
        stratum: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("schema error on line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("weight on objective {0} is zero")]
    DegenerateWeight(usize),
    #[error("loss became non-finite at step {step}")]
    DivergenceDetected { step: usize, trace: Vec<(usize, f64)> },
    #[error("external refiner requested but no transport is attached")]
    ExternalRefinerUnavailable,
    #[error("improvement response equals one of the original responses")]
    DegeneratePair,
    #[error("no Pareto-improving responses were found; policies left unchanged")]
    EmptyImprovementSet,
    #[error("front point {index} lies below the reference point")]
    ReferenceViolation { index: usize },
    #[error("front of {0} points is too large for exact inclusion-exclusion")]
    FrontTooLarge(usize),
    #[error("unknown ablation `{0}`")]
    UnknownAblation(String),
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Whether the error stems from invalid user configuration rather than a
    /// failure while running.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::InvalidEnv(_)
                | Error::InvalidWeight(_)
                | Error::InvalidRewardSpec { .. }
                | Error::UnknownAblation(_)
                | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
