use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the numeric core and the file formats.
#[derive(Error, Debug)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("backward: tape already consumed")]
    TapeConsumed,

    #[error("parameter {0} not found")]
    UnknownParam(String),

    #[error("parameter {0} already registered")]
    DuplicateParam(String),

    #[error("optimizer: parameter {0} has no gradient")]
    MissingGrad(String),

    #[error("{op}: {reason}")]
    Invalid { op: &'static str, reason: String },

    #[error("projection: point {index} at or behind the camera plane (z = {z})")]
    BehindCamera { index: usize, z: f64 },

    #[error("training diverged at step {step}: non-finite loss")]
    NonFiniteLoss { step: u64 },

    #[error("synthetic generator: no valid placement after {0} attempts")]
    PlacementFailed(usize),

    #[error("{path}: {reason}")]
    Format { path: String, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            op,
            reason: reason.into(),
        }
    }

    pub fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
