use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    Dimension {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("kernel spec parse error at offset {offset}: {message}")]
    KernelParse { offset: usize, message: String },

    #[error("cholesky factorization failed after jitter ladder {jitters:?}")]
    Factorization { jitters: Vec<f64> },

    #[error("all {restarts} optimizer restarts failed: {last}")]
    AllRestartsFailed { restarts: usize, last: Box<Error> },

    #[error("ensemble member {index} failed: {source}")]
    Member {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {message}")]
    Data { path: PathBuf, message: String },

    #[error("model archive: {0}")]
    Archive(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
}
