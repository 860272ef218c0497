use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty attention: every token in the bank is masked")]
    EmptyAttention,

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite value while evaluating `{0}`")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error at `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("graph file error: {0}")]
    GraphFile(String),

    #[error("client {client} aborted: {msg}")]
    ClientAborted { client: usize, msg: String },

    #[error("federation aborted in round {round}: no client survived")]
    FederationAborted { round: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
