use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform to the operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A caller broke an API precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("layout error: {0}")]
    Layout(String),

    #[error("budget of {budget} parameters is infeasible; the smallest model needs {minimum}")]
    Sizing { budget: u64, minimum: u64 },

    #[error("checkpoint error at byte offset {offset}: {detail}")]
    Checkpoint { offset: u64, detail: String },

    #[error("config error on line {line}: {detail}")]
    Config { line: usize, detail: String },

    /// Training produced a non-finite validation loss or gradient.
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(line: usize, detail: impl Into<String>) -> Self {
        Error::Config {
            line,
            detail: detail.into(),
        }
    }
}
