use thiserror::Error;

/// Errors surfaced by tensor construction, gradient evaluation, RNG
/// configuration, and QTNS I/O.
#[derive(Debug, Error)]
pub enum NumError {
    #[error("shape {shape:?} implies {expected} elements, got {actual}")]
    ShapeMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value in `{op}`")]
    NonFinite { op: &'static str },

    #[error("objective must be a scalar, got shape {shape:?}")]
    NonScalarObjective { shape: Vec<usize> },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("qtns: {0}")]
    Format(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl NumError {
    pub fn argument(msg: impl Into<String>) -> Self {
        NumError::Argument(msg.into())
    }
}
