use thiserror::Error;

/// Errors raised by the attention kernels and their tooling.
#[derive(Debug, Error)]
pub enum RfaError {
    /// A precondition on shapes or hyperparameters was violated.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Input that has no well-defined result, e.g. normalizing a zero vector.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("unsupported feature map kind for this operation: {0}")]
    UnsupportedKind(String),

    /// A scalar left the representable range of f64.
    #[error("value out of range: {0}")]
    Range(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, RfaError>;

pub(crate) fn param<T>(msg: impl Into<String>) -> Result<T> {
    Err(RfaError::Parameter(msg.into()))
}
