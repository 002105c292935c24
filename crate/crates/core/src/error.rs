use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("missing directory: {0}")]
    MissingDirectory(PathBuf),
    #[error("duplicate id: {0}")]
    DuplicateId(String),
    #[error("category folder has no items: {0}")]
    EmptyCategory(String),
    #[error("count mismatch: {0}")]
    CountMismatch(String),
    #[error("failed to load mesh {path}: {reason}")]
    MeshLoadFailure { path: PathBuf, reason: String },
    #[error("degenerate mesh: {0}")]
    DegenerateMesh(String),
    #[error("invalid camera rig: {0}")]
    InvalidRig(String),
    #[error("encoder unavailable: {0}")]
    EncoderUnavailable(String),
    #[error("backbone unavailable: {0}")]
    BackboneUnavailable(String),
    #[error("captioner unavailable: {0}")]
    CaptionerUnavailable(String),
    #[error("bad image size {width}x{height}: {reason}")]
    BadImageSize { width: usize, height: usize, reason: String },
    #[error("invalid timestep {t} (schedule has {len} steps)")]
    InvalidTimestep { t: usize, len: usize },
    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),
    #[error("hook mismatch: {0}")]
    HookMismatch(String),
    #[error("non-finite features: {0}")]
    NonFiniteFeatures(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty view set for {0}")]
    EmptyViewSet(String),
    #[error("non-finite similarity: {0}")]
    NonFiniteSimilarity(f64),
    #[error("unknown label: {0}")]
    UnknownLabel(String),
    #[error("non-finite loss at step {step}: {diagnostics}")]
    NonFiniteLoss { step: u64, diagnostics: String },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("checkpoint corrupt: {0}")]
    CheckpointCorrupt(String),
    #[error("embedding index is empty")]
    EmptyIndex,
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("incompatible assets: {0}")]
    Incompatible(String),
    #[error("cache entry corrupt: {0}")]
    CacheCorrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io_at(path: &std::path::Path, err: std::io::Error) -> Self {
        Error::Io(std::io::Error::new(
            err.kind(),
            format!("{}: {err}", path.display()),
        ))
    }
}
