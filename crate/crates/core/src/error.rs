use thiserror::Error;

/// Errors raised by tree construction, measure validation and the checkers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid tree at node `{node}`: {reason}")]
    InvalidTree { node: String, reason: String },

    #[error("invalid measure at node `{node}`: {reason}")]
    InvalidMeasure { node: String, reason: String },

    #[error("invalid stopping time: {0}")]
    InvalidStoppingTime(String),

    #[error("stopping times out of order: {0}")]
    OrderViolation(String),

    #[error("random variable does not match its anchor: {0}")]
    AnchorMismatch(String),

    #[error("invalid dual family: {0}")]
    InvalidFamily(String),

    #[error("linear program failed: {0}")]
    LpFailure(String),

    #[error("position not acceptable at atom `{atom}`")]
    NotAcceptable { atom: String },

    #[error("measure has nonzero minimal penalty: {0}")]
    NotZeroPenalty(String),

    #[error("invalid driver: {0}")]
    InvalidDriver(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("unsupported evaluation: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, Error>;
