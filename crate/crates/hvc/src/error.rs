//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {what}: expected {expected}, got {actual}")]
    ShapeMismatch {
        what: String,
        expected: String,
        actual: String,
    },

    #[error("no crop pair satisfied the overlap constraint after {attempts} attempts")]
    RetriesExhausted { attempts: u32 },

    #[error("parameter store mismatch at '{name}': {detail}")]
    StoreMismatch { name: String, detail: String },

    #[error("non-finite gradient in parameter '{name}'")]
    NonFiniteGradient { name: String },

    #[error("degenerate batch statistics in '{name}'")]
    DegenerateBatch { name: String },

    #[error("contrastive pair for anchor {anchor} has an empty negative set")]
    EmptyNegativeSet { anchor: usize },

    #[error("missing frame '{frame}' in video '{video}'")]
    MissingFrame { video: String, frame: String },

    #[error("class mismatch in video '{video}', frame '{frame}': {detail}")]
    ClassMismatch {
        video: String,
        frame: String,
        detail: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn shape(what: impl Into<String>, expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            what: what.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    /// Process exit code for the CLI: 1 for validation problems, 2 for
    /// numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFiniteGradient { .. } | Error::DegenerateBatch { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
