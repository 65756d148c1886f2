use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid task: {0}")]
    InvalidTask(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("enumeration budget exceeded: {terminals} terminal sequences (limit {limit})")]
    EnumerationBudget { terminals: u128, limit: u128 },

    #[error("non-finite {what} in parameter `{name}`")]
    NonFinite { what: &'static str, name: String },

    #[error("non-finite loss at round {round}: {detail}")]
    NonFiniteLoss { round: usize, detail: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{0}")]
    Precondition(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }
}
