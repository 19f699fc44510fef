use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid label prior: {0}")]
    InvalidPrior(String),

    #[error("prior entry {index} is zero; its logarithm is undefined")]
    ZeroPriorEntry { index: usize },

    #[error("minimum prior entry is zero: the imbalance factor is infinite")]
    InfiniteImbalance,

    #[error("tail class would be empty: n_max / if_target rounds to 0")]
    EmptyTailClass,

    #[error("need at least {min} classes, got {found}")]
    TooFewClasses { min: usize, found: usize },

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("class {0} does not occur in the labels")]
    MissingClass(usize),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line} has {found} logits, expected {expected}")]
    WidthMismatch { line: usize, expected: usize, found: usize },

    #[error("line {line}: non-finite logit")]
    NonFiniteInput { line: usize },

    #[error("line {line}: label {label} out of range for K={classes}")]
    LabelRange { line: usize, label: usize, classes: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(expected: impl ToString, found: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
