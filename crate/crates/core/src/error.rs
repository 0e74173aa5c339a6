use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Load {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}: line {line}: {message}")]
    Parse { file: String, line: u64, message: String },

    #[error("invalid dataset: {0}")]
    Invalid(String),

    #[error("time tag overflow: {tag} + {delta} does not fit in i64")]
    Range { tag: i64, delta: i64 },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("histogram has no peak (all bins are zero)")]
    NoPeak,

    #[error("no coincidences in cell ({0})")]
    EmptyCell(String),

    #[error("hypothesis test not possible: {0}")]
    NotTestable(String),

    #[error("incomplete set of rotated runs: missing {0}")]
    IncompleteSet(String),

    #[error("instance too large for the exact matching oracle: {n1} x {n2} events (limit 64)")]
    Size { n1: usize, n2: usize },

    #[error("singular efficiency model: denominator {0} <= 0")]
    SingularModel(f64),

    #[error("moments do not define a probability distribution: P({x:+},{y:+}) = {p}")]
    InvalidMoment { x: i8, y: i8, p: f64 },

    #[error("fewer than two of the four exclusion variants converged ({0})")]
    InsufficientSolutions(usize),

    #[error("invalid simulation config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
