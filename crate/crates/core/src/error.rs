use std::path::PathBuf;

use mcnet_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Image { path: PathBuf, detail: String },
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("kernel bank: {0}")]
    Bank(String),
    #[error("unknown cost model {name:?}; registered: {}", registered.join(", "))]
    UnknownCostModel { name: String, registered: Vec<String> },
    #[error("cost model {0:?} is a registered slot without a shipped implementation")]
    CostModelUnavailable(String),
    #[error("payload {payload} bpp is infeasible (capacity {capacity:.6} bpp)")]
    InfeasiblePayload { payload: f64, capacity: f64 },
    #[error("lambda search failed: {0}")]
    Solver(String),
    #[error("invalid change probabilities: {0}")]
    Probabilities(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("training aborted: {0}")]
    Training(String),
    #[error("metrics: {0}")]
    Metrics(String),
    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
