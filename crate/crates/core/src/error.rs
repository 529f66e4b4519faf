use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    // tensor container
    #[error("zero dimension in tensor shape {0:?}")]
    ZeroDimension(Vec<u32>),
    #[error("bad magic: expected ANOMTEN1")]
    BadMagic,
    #[error("truncated tensor: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("unsupported ndim {0}: must be 1..=4")]
    BadRank(usize),
    #[error("payload length {found} does not match shape {dims:?}")]
    PayloadMismatch { dims: Vec<u32>, found: usize },
    #[error("tensor has dtype {found}, expected {expected}")]
    DtypeMismatch { expected: &'static str, found: &'static str },

    // manifests
    #[error("manifest references missing file {0}")]
    MissingFile(PathBuf),
    #[error("duplicate manifest record for {0}")]
    DuplicateRecord(PathBuf),
    #[error("unknown split tag {0:?}")]
    UnknownSplit(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    // training
    #[error("empty loss: every pixel is ignored")]
    EmptyLoss,
    #[error("empty batch")]
    EmptyBatch,
    #[error("channel mismatch: expected {expected} channels, found {found}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    // statistics
    #[error("covariance is not positive definite")]
    NotPositiveDefinite,
    #[error("need more samples than dimensions: n = {n}, d = {d}")]
    InsufficientSamples { n: usize, d: usize },
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("probabilities do not sum to one (sum = {0})")]
    NotNormalized(f64),
    #[error("no fitted model for class {0}")]
    UnfittedClass(usize),

    // evaluation
    #[error("empty evaluation set")]
    EmptyEvalSet,
    #[error("single-class evaluation set: both anomaly and normal pixels are required")]
    SingleClass,
    #[error("degenerate meta training data: only one outcome present")]
    DegenerateOutcome,

    // discovery
    #[error("empty crop")]
    EmptyCrop,
    #[error("perplexity {perplexity} infeasible for {count} points")]
    InfeasiblePerplexity { perplexity: f64, count: usize },
    #[error("no cluster with at least {min_size} members")]
    NoQualifyingCluster { min_size: usize },
    #[error("zero relabeled pixels")]
    ZeroRelabeled,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
