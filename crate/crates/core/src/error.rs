use std::path::PathBuf;

use thiserror::Error;

use crate::engine::Phase;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed input: {0}")]
    Format(String),

    #[error("non-finite value at cell ({row}, {col}), byte offset {offset}")]
    NonFinite { row: usize, col: usize, offset: usize },

    #[error("{what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("{op} called in phase {phase:?}")]
    OutOfPhase { op: &'static str, phase: Phase },

    #[error("row {got} arrived out of order, expected row {expected}")]
    OutOfOrder { expected: usize, got: usize },

    #[error("kernel positivity violated at row {row} (d_tilde = {value}); increase degree g")]
    KernelPositivity { row: usize, value: f64 },

    #[error("measurement was produced by sketch {found:#018x}, not {expected:#018x}")]
    SketchMismatch { expected: u64, found: u64 },

    #[error("engine already finalized")]
    AlreadyFinalized,

    #[error("oracle guard: n = {n} exceeds the materialization limit {limit}")]
    OracleTooLarge { n: usize, limit: usize },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
