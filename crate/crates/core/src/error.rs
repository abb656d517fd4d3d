use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("probability entry {index} is negative ({value})")]
    NegativeEntry { index: usize, value: f64 },

    #[error("probabilities sum to {sum}, not 1 within 1e-6")]
    SumOutOfTolerance { sum: f64 },

    #[error("segment boundaries are not strictly increasing: {0:?}")]
    NotStrictlyIncreasing(Vec<usize>),

    #[error("segment boundaries must start at 0 and end at T={steps}: {boundaries:?}")]
    BadEndpoints { boundaries: Vec<usize>, steps: usize },

    #[error("plan has {segments} segments but at most {max} are allowed")]
    TooManySegments { segments: usize, max: usize },

    #[error("step {0} has no masked positions to average over")]
    EmptyStep(usize),

    #[error("traces have mixed trajectory lengths ({0} vs {1})")]
    MixedT(usize, usize),

    #[error("empty batch of traces")]
    EmptyBatch,

    #[error("q has zero probability at index {0} where p is positive")]
    QHasZeroSupport(usize),

    #[error("target segment count N={n} must satisfy 1 <= N <= T={steps}")]
    BadN { n: usize, steps: usize },

    #[error("completion position {0} is not masked")]
    PositionNotMasked(usize),

    #[error("bad shape: {0}")]
    BadShape(String),

    #[error("plan covers T={plan} steps but the trace has T={trace}")]
    TMismatch { plan: usize, trace: usize },

    #[error("shape mismatch: expected {expected} values, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },

    #[error("completion length L={length} is too small for task {task} (needs {needed})")]
    LTooSmall {
        task: String,
        length: usize,
        needed: usize,
    },

    #[error("RoEC at step {step} is {found}, expected {expected}")]
    RoecInconsistent {
        step: usize,
        found: f64,
        expected: f64,
    },

    #[error("run logs do not share an iteration grid ({0})")]
    GridMismatch(String),

    #[error("missing timings: {0}")]
    MissingTimings(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite loss at iteration {0}")]
    NonFinite(usize),

    #[error("model produced a non-finite distribution")]
    NonFiniteOutput,

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit status: 3 for I/O failures, 4 for numeric failures, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 3,
            Error::NonFinite(_) | Error::NonFiniteOutput => 4,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
