use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch {shapes:?}")]
    ShapeMismatch { op: &'static str, shapes: Vec<Vec<usize>> },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { op: &'static str, axis: usize, rank: usize },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),

    #[error("parameter tree mismatch: {0}")]
    TreeMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("tile side {s} m is not a multiple of patch side {p} m")]
    Divisibility { s: f64, p: f64 },

    #[error("invalid sub-patch layout: {0}")]
    Layout(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown modality `{0}`")]
    UnknownModality(String),

    #[error("dataset `{dataset}`: {reason}")]
    Dataset { dataset: String, reason: String },

    #[error("batch size {batch} exceeds the {tiles} tiles of dataset `{dataset}`")]
    BatchTooLarge { dataset: String, batch: usize, tiles: usize },

    #[error("channel padding: {have} channels present but {expected} expected")]
    TooManyChannels { have: usize, expected: usize },

    #[error("combiner input: {0}")]
    CombinerInput(String),

    #[error("contrastive loss inapplicable: {0}")]
    ContrastiveInapplicable(String),

    #[error("empty dropped-patch set")]
    EmptyDropSet,

    #[error("non-finite loss at step {step} (dataset `{dataset}`, P = {patch} m)")]
    NonFiniteLoss { step: usize, dataset: String, patch: f64 },

    #[error("corrupt header in {path}: {reason}")]
    CorruptHeader { path: PathBuf, reason: String },

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("head mismatch: {0}")]
    Head(String),

    #[error("metrics: {0}")]
    Metrics(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, shapes: &[&[usize]]) -> Self {
        Error::ShapeMismatch { op, shapes: shapes.iter().map(|s| s.to_vec()).collect() }
    }

    /// Whether the error stems from invalid user configuration (as opposed
    /// to I/O or a numeric failure).
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Divisibility { .. }
                | Error::Layout(_)
                | Error::Config(_)
                | Error::UnknownModality(_)
                | Error::Dataset { .. }
                | Error::BatchTooLarge { .. }
                | Error::TooManyChannels { .. }
                | Error::Head(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
