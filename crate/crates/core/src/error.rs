use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("graph: {0}")]
    Graph(String),

    #[error("model: {0}")]
    Model(String),

    #[error("data: {0}")]
    Data(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("unalignable word: item {item}, index {index}")]
    Unalignable { item: String, index: usize },

    #[error("training: {0}")]
    Training(String),

    #[error("non-finite loss at step {step}; parameters dumped to {}", snapshot.display())]
    NonFiniteLoss { step: usize, snapshot: PathBuf },

    #[error("metric: {0}")]
    Metric(String),

    #[error("stats: {0}")]
    Stats(String),

    #[error("rank-deficient design matrix; collinear columns: {}", columns.join(", "))]
    RankDeficient { columns: Vec<String> },

    #[error("plan: {0}")]
    Plan(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Validation failures map to exit code 1, everything else to 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Plan(_) | Error::Parse { .. } | Error::Json(_) | Error::Data(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
