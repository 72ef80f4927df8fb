use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("degenerate row: {0}")]
    DegenerateRow(String),
    #[error("degenerate vector: {0}")]
    DegenerateVector(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("probe error: {0}")]
    Probe(String),
    #[error("line {line}: {msg}")]
    Ingestion { line: usize, msg: String },
    #[error("library is empty")]
    EmptyLibrary,
    #[error("unknown demonstration id `{0}`")]
    Reference(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("capability error: {0}")]
    Capability(String),
    #[error("search error: {0}")]
    Search(String),
    #[error("non-finite loss in batch {batch}: {detail}")]
    NonFiniteLoss { batch: usize, detail: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("world spec error: {0}")]
    Spec(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("transport error (request {req_id}): {msg}")]
    Transport { req_id: String, msg: String },
    #[error("protocol error (request {req_id}): {msg}")]
    Protocol { req_id: String, msg: String },
    #[error("timed out waiting for request {req_id}")]
    Timeout { req_id: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors caused by bad inputs or configuration rather than by a failure
    /// while running. The CLI maps these to exit code 1.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Dimension(_)
                | Error::Ingestion { .. }
                | Error::EmptyLibrary
                | Error::Reference(_)
                | Error::Validation(_)
                | Error::Config(_)
                | Error::Capability(_)
                | Error::Spec(_)
                | Error::Unsupported(_)
                | Error::Checkpoint(_)
        )
    }
}

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
