use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("cannot place {vehicles} vehicles in lane {lane} on a {road_length} m road without overlap")]
    Placement {
        lane: usize,
        vehicles: usize,
        road_length: f64,
    },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("network integrity error: {0}")]
    Integrity(String),

    #[error("training diverged: {0}")]
    Training(String),

    #[error("missing prediction in the live branch of the critical-state reward")]
    MissingPrediction,

    #[error("cannot balance dataset: {0}")]
    Balance(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("model file {path}: {message}")]
    ModelFile { path: PathBuf, message: String },

    #[error("unsupported {what} version {found} (expected {expected})")]
    Version {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("search error: {0}")]
    Search(String),

    #[error("stage `{stage}` requires {missing}")]
    MissingArtifact { stage: String, missing: String },

    #[error("{0}")]
    Report(String),

    #[error("replay mismatch: {0}")]
    Replay(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
