use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("degenerate softmax row {row}: every entry is masked")]
    DegenerateRow { row: usize },

    #[error("index error: {0}")]
    Index(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("selection error: {0}")]
    Selection(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("degenerate visual ratio for layer {layer} head {head}: no mass on visual or prompt keys")]
    DegenerateRatio { layer: usize, head: usize },

    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),

    #[error("degenerate attention: {0}")]
    DegenerateAttention(String),

    #[error("backend error on segment {segment}: {reason}")]
    Backend { segment: usize, reason: String },

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("compatibility error: {0}")]
    Compatibility(String),

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Dimension { op, detail: detail.into() }
}
