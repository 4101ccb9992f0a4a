use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid dimensions: {0}")]
    Dims(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("corrupt sidecar {path}: {reason}")]
    CorruptSidecar { path: PathBuf, reason: String },
    #[error("payload size mismatch for {path}: sidecar claims {expected} values, payload holds {actual}")]
    PayloadMismatch {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("truncated or malformed checkpoint: {0}")]
    CheckpointFormat(String),
    #[error("checkpoint config conflicts with requested model config: {0}")]
    ConfigConflict(String),
    #[error("epoch {epoch} is beyond the end of the schedule ({total} epochs)")]
    EpochOutOfRange { epoch: usize, total: usize },
    #[error("not enough subjects: {subjects} subjects for {splits} splits")]
    NotEnoughSubjects { subjects: usize, splits: usize },
    #[error("non-finite loss at epoch {epoch} step {step} (samples {samples:?})")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        samples: Vec<String>,
    },
    #[error("missing data: {0}")]
    Missing(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("png encoding error: {0}")]
    Png(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
