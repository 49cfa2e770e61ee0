use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Structurally malformed input (duplicate ids, dangling edges, bad shapes).
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("grid violates model assumptions: {0}")]
    InvalidGrid(String),

    #[error("node {node:?}: injection covariance determinant {det:.3e} is below threshold {lambda:.3e}")]
    Conditioning { node: String, det: f64, lambda: f64 },

    #[error("distances are not an additive tree metric: {0}")]
    NotAdditive(String),

    #[error("recursive grouping stopped after {rounds} rounds with {remaining} active nodes: {reason}")]
    Grouping {
        rounds: usize,
        remaining: usize,
        reason: String,
    },

    #[error("linear system is rank deficient: {0}")]
    RankDeficient(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("parse error in {source_name}: {message}")]
    Parse {
        source_name: String,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(source_name: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            source_name: source_name.into(),
            message: message.into(),
        }
    }
}
