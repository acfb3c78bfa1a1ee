use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid shape {rows}x{cols} with {len} values")]
    InvalidShape { rows: usize, cols: usize, len: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("{op}: need at least {needed} rows, got {got}")]
    TooFewRows {
        op: &'static str,
        needed: usize,
        got: usize,
    },

    #[error("row count mismatch: {left} vs {right} (samples must be matched)")]
    RowCountMismatch { left: usize, right: usize },

    #[error("assignment needs rows <= cols, got a {rows}x{cols} cost matrix")]
    MoreRowsThanCols { rows: usize, cols: usize },

    #[error("brute-force assignment limited to {limit} columns, got {rows}x{cols}")]
    BruteForceTooLarge { rows: usize, cols: usize, limit: usize },

    #[error("student dimension {student} exceeds teacher dimension {teacher}; only pruning is supported")]
    StudentWiderThanTeacher { student: usize, teacher: usize },

    #[error("mapping length {got} does not match expected {expected}")]
    MapLengthMismatch { expected: usize, got: usize },

    #[error("index {index} out of range (bound {bound})")]
    IndexOutOfRange { index: usize, bound: usize },

    #[error("mapping is not injective: index {0} assigned twice")]
    NotInjective(usize),

    #[error("layer count mismatch: expected {expected}, got {got}")]
    LayerCountMismatch { expected: usize, got: usize },

    #[error("teacher layer count {teacher} is not divisible by student layer count {student}")]
    NonDivisibleLayers { teacher: usize, student: usize },

    #[error("skip offset {offset} must be smaller than the stride {stride}")]
    InvalidSkipOffset { offset: usize, stride: usize },

    #[error("hidden sizes differ ({teacher} vs {student}): alignment samples are required")]
    MissingSamples { teacher: usize, student: usize },

    #[error("inconsistent module set: {0}")]
    InvalidModuleSet(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Container(#[from] ContainerError),
}

impl Error {
    /// Errors caused by how the caller asked for something (as opposed to bad data).
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::NonDivisibleLayers { .. }
                | Error::InvalidSkipOffset { .. }
                | Error::MissingSamples { .. }
                | Error::InvalidConfig(_)
        )
    }
}

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 8]),

    #[error("truncated container: {0}")]
    Truncated(String),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("tensor {name}: shape {shape:?} as {dtype} needs {expected} bytes, header says {got}")]
    NbytesMismatch {
        name: String,
        dtype: &'static str,
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },

    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),

    #[error("invalid tensor name {0:?}")]
    InvalidName(String),

    #[error("missing tensor {0:?}")]
    MissingTensor(String),

    #[error("tensor {name}: expected rank {expected}, found shape {shape:?}")]
    UnexpectedRank {
        name: String,
        expected: usize,
        shape: Vec<usize>,
    },

    #[error("missing metadata key {0:?}")]
    MissingMeta(String),

    #[error("metadata {key}={value:?} is invalid")]
    InvalidMeta { key: String, value: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}
