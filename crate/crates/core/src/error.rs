use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("numeric failure in {context}: {detail}")]
    Numeric { context: String, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    /// Well-formed input that cannot be used as given, such as unlabeled
    /// sentences where labels are needed.
    #[error("invalid data: {0}")]
    Data(String),

    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },

    #[error("line {line}: unknown entity type `{etype}`")]
    Schema { line: usize, etype: String },

    #[error("overlapping spans {first} and {second}")]
    Overlap { first: String, second: String },

    #[error("cannot pair {gold} gold sentences with {pred} predicted sentences")]
    Pairing { gold: usize, pred: usize },

    #[error("lexicon has no entry for phrase `{0}`")]
    Coverage(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn numeric(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            context: context.into(),
            detail: detail.into(),
        }
    }

    /// Process exit code for the command-line front end: 1 usage/config,
    /// 2 data/format, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) => 1,
            Error::Numeric { .. } | Error::Shape { .. } => 3,
            Error::Data(_)
            | Error::Format { .. }
            | Error::Schema { .. }
            | Error::Overlap { .. }
            | Error::Pairing { .. }
            | Error::Coverage(_)
            | Error::Checkpoint(_)
            | Error::Io(_)
            | Error::Json(_) => 2,
        }
    }
}
