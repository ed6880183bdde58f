use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("resource limit exceeded: {0}")]
    Resource(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    /// A next-step distribution with an exactly-zero probability was passed
    /// where a strictly positive one is required.
    #[error("degenerate distribution: {0}")]
    DegenerateDistribution(String),

    #[error("outside domain: {0}")]
    Domain(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt data: {0}")]
    Corruption(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}
