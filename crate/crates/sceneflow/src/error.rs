//! Crate-wide error type.

use thiserror::Error;

use crate::optim::FitTrace;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{what}: length {actual} does not match expected length {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{what} contains a non-finite value at index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("point cloud must contain at least one point")]
    EmptyCloud,

    #[error("query point has a non-finite coordinate")]
    NonFiniteQuery,

    #[error("radius must be non-negative and finite, got {0}")]
    InvalidRadius(f64),

    #[error("lambda must lie in [0, 1], got {0}")]
    LambdaOutOfRange(f64),

    #[error("neighbor index {index} is out of bounds for a target of {len} points")]
    NeighborIndexOutOfBounds { index: usize, len: usize },

    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid scene spec: {0}")]
    InvalidSceneSpec(String),

    #[error("scene pair is invalid: {0}")]
    InvalidScenePair(String),

    #[error("activation record does not match this network or input: {0}")]
    StaleActivationRecord(String),

    #[error("non-finite gradient for parameter {index}")]
    NonFiniteGradient { index: usize },

    #[error("fit aborted at iteration {iteration}: {reason}")]
    FitAborted {
        iteration: usize,
        reason: String,
        trace: Box<FitTrace>,
    },

    #[error("bin edges must be strictly increasing and contain at least two values")]
    InvalidBinEdges,

    #[error("{what} must be positive, got {value}")]
    NonPositive { what: &'static str, value: f64 },

    #[error("errors passed to the histogram must be non-negative, found {value} at index {index}")]
    NegativeError { index: usize, value: f64 },

    #[error("ground removal at threshold {threshold} m removed all {removed} points")]
    AllPointsRemoved { threshold: f64, removed: usize },

    #[error("{path}: {source}")]
    FileIo {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: bad magic at byte 0, expected \"PCF1\"")]
    BadMagic { path: String },

    #[error("{path}: {what} at byte {offset}")]
    MalformedBinary {
        path: String,
        what: String,
        offset: usize,
    },

    #[error("{path}:{line}: {what}")]
    MalformedCsv {
        path: String,
        line: usize,
        what: String,
    },

    #[error("refusing to write an empty {what} to {path}")]
    EmptyWrite { what: &'static str, path: String },

    #[error("{path}: failed to parse: {message}")]
    MalformedConfig { path: String, message: String },

    #[error("manifest {path}: {what}")]
    InvalidManifest { path: String, what: String },
}
