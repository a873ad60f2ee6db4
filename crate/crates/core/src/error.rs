use thiserror::Error;

use crate::harness::TrainLog;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate column {index}: zero norm")]
    DegenerateColumn { index: usize },

    #[error("insufficient classes: {usable} usable, need at least 2 (excluded: {excluded:?})")]
    InsufficientClasses { usable: usize, excluded: Vec<usize> },

    #[error("row {index} is not unit norm (norm {norm})")]
    Normalization { index: usize, norm: f64 },

    #[error("class {index} has zero count; filter absent classes before computing the imbalance factor")]
    ExcludedClass { index: usize },

    #[error("correlation undefined: zero variance in {which}")]
    UndefinedCorrelation { which: &'static str },

    #[error("split error: need at least 3 classes, got {0}")]
    Split(usize),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("stale forward cache: parameters changed since the forward pass")]
    StaleCache,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("training diverged at iteration {iteration}")]
    Diverged {
        iteration: usize,
        partial: Box<TrainLog>,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }
}
