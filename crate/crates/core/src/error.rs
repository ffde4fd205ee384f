//! Error surface shared by every module in the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors (or a tensor and an op contract) disagree on shape.
    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    /// Batch statistics are undefined: fewer than two elements per channel.
    #[error("batchnorm train mode needs at least 2 elements per channel, got {elements}")]
    DegenerateVariance { elements: usize },

    /// Survival probabilities must lie in (0, 1]; 0 would divide by zero
    /// under inverted scaling.
    #[error("survival probability must be in (0, 1], got {value}")]
    InvalidProbability { value: f64 },

    /// A label fell outside the class range.
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    /// Bad model / experiment configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A dataset archive had the wrong length or structure.
    #[error("corrupt archive {path}: expected {expected} bytes, got {actual}")]
    CorruptArchive {
        path: String,
        expected: u64,
        actual: u64,
    },

    /// An input argument violated an operation's preconditions.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A forward value, loss or gradient stopped being finite.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Checkpoint archive could not be decoded.
    #[error("bad checkpoint {path}: {reason}")]
    BadCheckpoint { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(context: impl Into<String>, expected: &[usize], actual: &[usize]) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}
