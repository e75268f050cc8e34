use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("line {line}: dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatchAt {
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("vector norm below {threshold:e}")]
    ZeroNorm { threshold: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty input")]
    EmptyInput,

    #[error("utterance of speaker {found:?} passed while averaging speaker {expected:?}")]
    MixedSpeakers { expected: String, found: String },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: duplicate utterance ({speaker_id}, {utterance_id})")]
    DuplicateUtterance {
        line: usize,
        speaker_id: String,
        utterance_id: String,
    },

    #[error("duplicate candidate speaker {0:?} in pool")]
    DuplicateCandidate(String),

    #[error("candidate pool is empty")]
    EmptyPool,

    #[error("k = {k} exceeds pool size {pool_size}")]
    KTooLarge { k: usize, pool_size: usize },

    #[error("k must be at least 1")]
    ZeroK,

    #[error("layer {layer}: expected input width {expected}, found {found}")]
    DimensionChainBroken {
        layer: usize,
        expected: usize,
        found: usize,
    },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("training set is empty")]
    EmptyTrainingSet,

    #[error("objective became non-finite at iteration {iteration}")]
    NonFiniteObjective { iteration: usize },

    #[error("invalid reprogramming parameters: {0}")]
    InvalidParams(String),

    #[error("invalid optimizer configuration: {0}")]
    InvalidConfig(String),

    #[error("score set has no genuine or no impostor scores")]
    EmptyScores,

    #[error("unknown speaker {0:?}")]
    UnknownSpeaker(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
