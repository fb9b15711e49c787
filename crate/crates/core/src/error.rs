use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("prompt too long: {tokens} tokens exceeds the limit of {limit}")]
    Length { tokens: usize, limit: usize },

    #[error("empty prompt")]
    EmptyPrompt,

    #[error("invalid state: {0}")]
    State(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("edit is a no-op: the edited prompt has no modified words")]
    NoOp,

    #[error("backend failed at step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("backend unreachable at {addr}: {source}")]
    Unreachable {
        addr: String,
        #[source]
        source: io::Error,
    },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("remote error {code:#06x}: {message}")]
    Remote { code: u16, message: String },

    #[error("attention record not found at {0}")]
    MissingRecord(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::EmptyPrompt | Error::Length { .. } => 2,
            Error::Unreachable { .. } => 3,
            Error::MissingRecord(_) => 4,
            Error::Step { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}
