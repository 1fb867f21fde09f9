use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("invalid field of view: up={fov_up} down={fov_down}")]
    InvalidFov { fov_up: f64, fov_down: f64 },
    #[error("invalid sensor model: {0}")]
    InvalidSensor(String),
    #[error("non-invertible pose: {0}")]
    SingularPose(String),
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },
    #[error("equivariance violation: {0}")]
    EquivarianceViolation(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("sequence too short: {got} scans, need at least {min}")]
    SequenceTooShort { got: usize, min: usize },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error(
        "query {query}: need {need_pos} positives and {need_neg} negatives, \
         have {have_pos} and {have_neg}"
    )]
    InsufficientSamples {
        query: usize,
        need_pos: usize,
        have_pos: usize,
        need_neg: usize,
        have_neg: usize,
    },
    #[error("scan ids must increase: got {got} after {last}")]
    OutOfOrder { last: u64, got: u64 },
    #[error("no eligible training queries")]
    NoEligibleQueries,
    #[error("duplicate descriptor id {0}")]
    DuplicateId(u64),
    #[error("dimension mismatch: index has {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("unknown scan id {0}")]
    UnknownId(u64),
    #[error("missing sub-descriptor cache entry for scan {0}")]
    MissingCache(usize),
    #[error("{path}: malformed point cloud: {len} bytes is not a multiple of 16 (trailing bytes start at offset {offset})")]
    MalformedCloud {
        path: PathBuf,
        len: u64,
        offset: u64,
    },
    #[error("{path}:{line}: {msg}")]
    MalformedPose {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("bad file format: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
