use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("class representation {class} has zero norm")]
    ZeroClassRep { class: usize },

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("model was trained for {trained}-shot episodes but received {requested}-shot")]
    ShotMismatch { trained: usize, requested: usize },

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn parse(offset: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            msg: msg.into(),
        }
    }
}
