use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("token {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown character {0:?}")]
    UnknownChar(char),

    #[error("kv cache full ({0} positions)")]
    CacheFull(usize),

    #[error("conditioning event has probability zero: {0}")]
    ZeroProbability(String),

    #[error("checkpoint error at byte {offset}: {msg}")]
    Checkpoint { offset: u64, msg: String },

    #[error("training diverged at step {step}: {msg}")]
    Diverged { step: u64, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
