use thiserror::Error;

/// Errors produced by datastore construction, retrieval, scoring and training.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch at pair {index}: expected {expected}, got {got}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("token id {token} at pair {index} out of range (vocab size {vocab_size})")]
    TokenOutOfRange {
        index: usize,
        token: u32,
        vocab_size: u32,
    },
    #[error("non-finite value at pair {index}")]
    NonFinite { index: usize },
    #[error("empty datastore")]
    EmptyDatastore,
    #[error("k must be positive")]
    ZeroK,
    #[error("query dimension {got} does not match datastore dimension {expected}")]
    QueryDimMismatch { expected: usize, got: usize },
    #[error("empty neighbor set")]
    EmptyNeighborSet,
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("lambda must be in [0, 1], got {0}")]
    BadLambda(f64),
    #[error("probability vector length mismatch: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("series length mismatch: {a} vs {b}")]
    SeriesLengthMismatch { a: usize, b: usize },
    #[error("need at least {need} observations, got {got}")]
    TooFewObservations { need: usize, got: usize },
    #[error("zero probability in series at position {0}")]
    ZeroProbability(usize),
    #[error("word has zero in-domain frequency")]
    ZeroInDomainFrequency,
    #[error("neighbor sets were not retained during scoring")]
    MissingNeighborRetention,
    #[error("empty training data")]
    EmptyTrainingData,
    #[error("empty hyper-parameter grid")]
    EmptyGrid,
    #[error("bad magic bytes: expected {expected:?}, got {got:?}")]
    BadMagic { expected: [u8; 4], got: [u8; 4] },
    #[error("unsupported format version {0}")]
    VersionMismatch(u16),
    #[error("truncated file: {0}")]
    TruncatedFile(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
