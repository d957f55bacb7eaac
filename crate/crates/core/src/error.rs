use thiserror::Error;

/// Everything that can go wrong inside the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate record (writer {writer}, character {character}, repetition {repetition})")]
    DuplicateRecord {
        writer: u64,
        character: String,
        repetition: u64,
    },
    #[error("unknown character label {0:?}")]
    BadLabel(String),
    #[error("bad value: {0}")]
    BadValue(String),
    #[error("zero-variance feature column {0} in reference data")]
    DegenerateScale(usize),
    #[error("writer {0} not present in the data")]
    UnknownWriter(u64),
    #[error("cannot split writer {writer}: character {character} has {count} repetition(s)")]
    SplitInfeasible {
        writer: u64,
        character: String,
        count: usize,
    },
    #[error("negative amplitude {0}")]
    BadAmplitude(f64),
    #[error("{samples} samples cannot determine {harmonics} harmonics")]
    Underdetermined { samples: usize, harmonics: usize },
    #[error("contour has nonpositive area {0}")]
    DegenerateContour(f64),
    #[error("matrix is not symmetric positive definite: {0}")]
    BadCovariance(String),
    #[error("need at least two writers, got {0}")]
    NeedMoreWriters(usize),
    #[error("writer {writer} has no repetitions of character {character}")]
    MissingCell { writer: u64, character: String },
    #[error("degrees of freedom {nu} below the minimum {min}")]
    BadDof { nu: f64, min: f64 },
    #[error("nonpositive variance {0} on the diagonal")]
    BadVariance(f64),
    #[error("empty or invalid grid: {0}")]
    BadGrid(String),
    #[error("model mismatch: {0}")]
    BadModel(String),
    #[error("invalid correlation matrix: {0}")]
    BadCorrelation(String),
    #[error("split R-hat needs at least two chains")]
    NeedMoreChains,
    #[error("need at least {needed} draws, got {got}")]
    NeedMoreDraws { needed: usize, got: usize },
    #[error("bridge estimator degenerate: {0}")]
    EstimatorDegenerate(String),
    #[error("background data contains case writer {0}")]
    LeakageError(u64),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Coarse classification used by front ends to choose an exit status.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        use Error::*;
        match self {
            Config(_) | BadGrid(_) | BadDof { .. } | BadModel(_) => ErrorKind::Usage,
            BadCovariance(_)
            | BadCorrelation(_)
            | EstimatorDegenerate(_)
            | DegenerateScale(_)
            | DegenerateContour(_)
            | BadVariance(_) => ErrorKind::Numerical,
            _ => ErrorKind::Data,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
