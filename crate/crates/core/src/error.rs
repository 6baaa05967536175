use thiserror::Error;

/// Crate-wide error type. Shape errors name the offending dimension so a
/// failing call can be diagnosed without a debugger.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch on {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        what: &'static str,
        expected: String,
        got: String,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("{op}: non-finite value in {what}")]
    NonFinite { op: &'static str, what: &'static str },

    #[error("label {label} out of range for {classes} classes (sample {sample})")]
    LabelOutOfRange {
        label: usize,
        classes: usize,
        sample: usize,
    },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("cannot read image {path}: {msg}")]
    ImageRead { path: String, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training run diverged at epoch {epoch}, step {step} (non-finite loss)")]
    Diverged { epoch: usize, step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable one-word category for exit-time reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape",
            Error::InvalidArgument { .. } => "invalid-argument",
            Error::NonFinite { .. } => "non-finite",
            Error::LabelOutOfRange { .. } => "label",
            Error::Dataset(_) => "dataset",
            Error::ImageRead { .. } => "image",
            Error::Checkpoint(_) => "checkpoint",
            Error::Diverged { .. } => "diverged",
            Error::Io(_) => "io",
        }
    }

    pub(crate) fn shape(
        op: &'static str,
        what: &'static str,
        expected: impl ToString,
        got: impl ToString,
    ) -> Self {
        Error::ShapeMismatch {
            op,
            what,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl ToString) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.to_string(),
        }
    }
}
