use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("shape error at node {node}: {detail}")]
    NodeShape { node: usize, detail: String },

    #[error("missing input `{0}`")]
    MissingInput(String),

    #[error("backward called before forward")]
    NotEvaluated,

    #[error("loss must be 1x1, got {0}x{1}")]
    NonScalarLoss(usize, usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("overlapping spans: {0}")]
    OverlappingSpans(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
