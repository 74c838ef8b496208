use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("symmetric part of the game matrix is not positive definite (min eigenvalue {0:.6e})")]
    NotStronglyMonotone(f64),

    #[error("eigen/singular value decomposition failed: {0}")]
    Decomposition(String),

    #[error("no convergence after {iterations} iterations (last step {last_step:.3e})")]
    NoConvergence { iterations: usize, last_step: f64 },

    #[error("the {delta}-th moment diverges for tail index {alpha}")]
    MomentDiverges { alpha: f64, delta: f64 },

    #[error("too few samples: need {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("empty input")]
    Empty,

    #[error("{seeker}, trial {trial}, iteration {iteration}: {source}")]
    Trial {
        seeker: String,
        trial: u64,
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("csv {path}:{line}: {reason}")]
    Csv {
        path: String,
        line: usize,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
