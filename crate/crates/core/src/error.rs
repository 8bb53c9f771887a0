use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric failure: {0}")]
    NumericFailure(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("remote oracle rejected the request: {0}")]
    RemoteRejection(String),

    #[error("format error at line {line}: {message}")]
    Format { line: usize, message: String },

    #[error("task generation failed after {attempts} attempts: {reason}")]
    TaskGeneration { attempts: usize, reason: String },

    #[error("client {client} failed: {source}")]
    RoundFailure {
        client: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("round {round}: {source}")]
    Experiment {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
