use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box ({cx}, {cy}, {w}, {h}): sides must be positive and all fields finite")]
    InvalidBox { cx: f64, cy: f64, w: f64, h: f64 },

    #[error("invalid grid spec: {0}")]
    InvalidGridSpec(String),

    #[error("scale {scale} yields no boxes for a {width}x{height} image")]
    EmptyGrid { scale: u32, width: f64, height: f64 },

    #[error("step {step} outside [1, {s_train}]")]
    StepOutOfRange { step: usize, s_train: usize },

    #[error("box does not intersect the {width}x{height} feature map")]
    BoxOutsideImage { width: usize, height: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("model mismatch: {0}")]
    ModelMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("could not place object {object} in scene {scene_id} after {retries} attempts")]
    PlacementFailure { scene_id: u64, object: usize, retries: usize },

    #[error("invalid similarity groups: {0}")]
    InvalidSimilarityGroups(String),

    #[error("malformed {what} at line {line}: {reason}")]
    Malformed { what: &'static str, line: usize, reason: String },

    #[error("checksum mismatch for scene {scene_id}: manifest {expected}, regenerated {actual}")]
    ChecksumMismatch { scene_id: u64, expected: String, actual: String },

    #[error("unsupported {what} format version {found} (expected {expected})")]
    UnsupportedVersion { what: &'static str, found: u32, expected: u32 },

    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
