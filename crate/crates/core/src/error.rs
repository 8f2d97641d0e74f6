use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("no children of terminal state")]
    TerminalState,

    #[error("space too large for enumeration: {count} terminals exceeds cap {cap}")]
    SpaceTooLarge { count: u128, cap: u64 },

    #[error("NaN in input")]
    NaN,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("KL undefined: action {action} has positive policy mass but zero reference mass")]
    KlUndefined { action: usize },

    #[error("action index {index} out of range for {arity} legal actions")]
    ActionOutOfRange { index: usize, arity: usize },

    #[error("invalid policy distribution: {0}")]
    InvalidDistribution(String),

    #[error("missing policy entry for state {0:?}")]
    MissingPolicy(Vec<u16>),

    #[error("variance undefined for batch of size {0}")]
    VarianceUndefined(usize),

    #[error("sequence not in reward table: {0}")]
    MissingSequence(String),

    #[error("sequence has wrong length: expected {expected}, got {got}")]
    WrongLength { expected: usize, got: usize },

    #[error("2D trace requires two actions, got {0}")]
    TraceArity(usize),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_) | Error::Diverged { .. } | Error::NaN | Error::KlUndefined { .. }
        )
    }
}
