use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode {path}: {msg}")]
    Decode { path: PathBuf, msg: String },
    #[error("invalid dimensions: {0}")]
    InvalidDim(String),
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: String, got: String },
    #[error("mask covers every pixel")]
    AllMasked,
    #[error("invalid threshold: {0}")]
    InvalidThreshold(String),
    #[error("model has not been trained")]
    ModelUntrained,
    #[error("d_max {0} exceeds 200")]
    InvalidDmax(usize),
    #[error("embedding for image `{0}` not found")]
    MissingEmbedding(String),
    #[error("score is not a member of the rank pool")]
    ScoreNotInPool,
    #[error("no rank context for meme `{0}`")]
    MissingContext(String),
    #[error("reference set is empty")]
    EmptyReferenceSet,
    #[error("training data is empty")]
    EmptyData,
    #[error("too few samples: {0}")]
    TooFewSamples(String),
    #[error("need at least two pairs of each class, {0}")]
    TooFewPerClass(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no features for pair `{pair_id}` measure `{measure}`")]
    MissingFeatures { pair_id: String, measure: String },
    #[error("sample is empty")]
    EmptySample,
    #[error("all paired differences are zero")]
    AllZeroDifferences,
    #[error("incomplete evaluation grid: {0}")]
    IncompleteGrid(String),
    #[error("could not generate distinct references after {0} retries")]
    CollisionExhaustion(usize),
    #[error("ratio infeasible: {0}")]
    RatioInfeasible(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("duplicate pair id `{0}`")]
    DuplicatePairId(String),
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("stale cache: {0}")]
    StaleCache(String),
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
