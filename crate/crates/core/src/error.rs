use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("degenerate neighborhood: {0}")]
    DegenerateNeighborhood(String),

    #[error("empty graph: {0}")]
    EmptyGraph(String),

    #[error("empty sequence")]
    EmptySequence,

    #[error("batch too small for training-mode batch norm (got {0} rows)")]
    BatchTooSmall(usize),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("graph construction error: {0}")]
    Construction(String),

    #[error("topology error: {0}")]
    Topology(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("graph binding error: expected {expected} nodes, got {got}")]
    Binding { expected: usize, got: usize },

    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Divergence { epoch: usize, batch: usize, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
