use std::fmt;

/// Errors surfaced by tensor ops, model construction, training and I/O.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor shapes are inconsistent with the operation's contract.
    InvalidShape(String),
    /// A numeric argument is out of range or non-finite.
    InvalidParameter(String),
    /// A configuration value violates a structural constraint.
    InvalidConfig(String),
    /// Every pixel of a loss batch is masked out.
    DegenerateBatch,
    /// Metrics were requested over an empty validity mask.
    DegenerateInput,
    /// An optimizer step was skipped because a gradient was not finite.
    AbortStep(String),
    /// The gradient-check harness detected a non-deterministic closure.
    Harness(String),
    /// File could not be read, written or decoded.
    Io(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidShape(msg) => write!(f, "invalid shape: {msg}"),
            Error::InvalidParameter(msg) => write!(f, "invalid parameter: {msg}"),
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Error::DegenerateBatch => write!(f, "degenerate batch: validity mask is empty"),
            Error::DegenerateInput => write!(f, "degenerate input: no valid pixels"),
            Error::AbortStep(msg) => write!(f, "optimizer step aborted: {msg}"),
            Error::Harness(msg) => write!(f, "gradient-check harness error: {msg}"),
            Error::Io(msg) => write!(f, "io error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<png::DecodingError> for Error {
    fn from(e: png::DecodingError) -> Self {
        Error::Io(format!("png decode: {e}"))
    }
}

impl From<png::EncodingError> for Error {
    fn from(e: png::EncodingError) -> Self {
        Error::Io(format!("png encode: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
