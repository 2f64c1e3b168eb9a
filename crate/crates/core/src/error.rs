use std::io;

use thiserror::Error;

use crate::trace::Violation;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("context overflow: {len} tokens exceeds max_context {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("prompt too long: {len} tokens, max_context {max}")]
    PromptTooLong { len: usize, max: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unsupported version {0}")]
    UnsupportedVersion(i64),

    #[error("trace failed validation: {}", format_violations(.0))]
    Validation(Vec<Violation>),

    #[error("empty trace")]
    EmptyTrace,

    #[error("missing field `{0}`")]
    MissingField(&'static str),

    #[error("invalid stage spec: {0}")]
    Stages(String),

    #[error("invalid lexicon: {0}")]
    Lexicon(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
