use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value in {context} at step {step}")]
    Numeric { context: String, step: usize },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated input: expected {expected} more bytes at offset {offset}")]
    Length { offset: usize, expected: usize },

    #[error("missing artifact {path}: {hint}")]
    MissingArtifact { path: String, hint: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn numeric(context: impl Into<String>, step: usize) -> Self {
        Error::Numeric {
            context: context.into(),
            step,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Validation(_) | Error::Contract(_) => 2,
            Error::Dimension { .. } => 2,
            Error::Numeric { .. } => 3,
            Error::Parse { .. }
            | Error::Format(_)
            | Error::Length { .. }
            | Error::MissingArtifact { .. }
            | Error::Io(_) => 4,
        }
    }
}
