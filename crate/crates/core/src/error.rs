use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by tensor math, the network engine, attribution,
/// image I/O, the evaluation harness, and the derivation auditor.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("invalid reduction axes {axes:?} for rank {rank}")]
    InvalidAxes { axes: Vec<usize>, rank: usize },

    #[error("layer index {index} out of range for {count} layers")]
    LayerOutOfRange { index: usize, count: usize },

    #[error("layer {index} does not produce a spatial feature map")]
    NonSpatialLayer { index: usize },

    #[error("class index {index} out of range for {count} classes")]
    ClassOutOfRange { index: usize, count: usize },

    #[error("unknown architecture `{0}`")]
    UnknownArch(String),

    #[error("invalid attribution request: {0}")]
    InvalidRequest(String),

    #[error("invalid layer configuration: {0}")]
    InvalidLayer(String),

    #[error("model file has bad magic bytes")]
    BadMagic,

    #[error("model file has unsupported version {0}")]
    UnsupportedVersion(u32),

    #[error("model file truncated while reading {0}")]
    Truncated(String),

    #[error("model manifest invalid: {0}")]
    ManifestInvalid(String),

    #[error("image format: {0}")]
    ImageFormat(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("audit: {0}")]
    Audit(String),

    #[error("unsupported report format `{0}`")]
    ReportFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
