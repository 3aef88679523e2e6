//! Crate-wide error type.

/// Errors produced by the NAEL library.
#[derive(Debug, thiserror::Error)]
pub enum NaelError {
    /// A parameter fell outside its allowed domain.
    #[error("parameter out of domain: {0}")]
    Parameter(String),

    /// An operation was invoked on a modulation scheme it does not apply to.
    #[error("wrong scheme: {0}")]
    WrongScheme(String),

    /// Tensor or feature-map shapes do not conform.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Input too short or too long for the operation.
    #[error("size error: {0}")]
    Size(String),

    /// Degenerate input (zero variance, single-element batch, single-class labels).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Operation invoked out of order (e.g. backward before forward).
    #[error("state error: {0}")]
    State(String),

    /// Class label out of range.
    #[error("label out of range: {0}")]
    Label(String),

    /// Malformed file; `offset` is the byte position of the first problem.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// A required prerequisite (e.g. a checkpoint) is missing.
    #[error("missing dependency: {0}")]
    Dependency(String),

    /// Training diverged (non-finite loss).
    #[error("training diverged at update {step}: {msg}")]
    Training { step: usize, msg: String },

    /// A caller-side contract was violated (e.g. unnormalized network input).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Checkpoint/config incompatibility.
    #[error("incompatible artifacts: {0}")]
    Incompatible(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NaelError>;
