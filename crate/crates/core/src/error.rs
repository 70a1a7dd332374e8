use thiserror::Error;

/// Errors produced anywhere in the lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("empty axis in {0}")]
    EmptyAxis(&'static str),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unknown token {0:?}")]
    Vocabulary(String),

    #[error("insufficient samples: {0}")]
    Insufficient(String),

    #[error("gradient oracle: {0}")]
    Oracle(String),

    #[error("training diverged at step {step}: {reason}")]
    Training { step: usize, reason: String },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
