//! Crate-wide error type.
//!
//! Every fallible operation in the simulator returns [`Error`]; the variants
//! are grouped by the subsystem that raises them rather than by payload shape
//! so call sites can report something actionable without string matching.

use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor construction or combination with incompatible extents.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Tensor data does not contain exactly `product(shape)` values.
    #[error("tensor data has {got} values but shape {shape:?} requires {expected}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },

    /// A NaN or infinity reached a tensor constructor.
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    /// Both range endpoints are zero, so no finite scale reproduces the data.
    #[error("degenerate quantization range: r_min and r_max are both zero")]
    DegenerateRange,

    /// Quantizer parameters violate their contract (bad range signs, zero-bit
    /// scale requests, channel-count mismatches, ...).
    #[error("invalid quantizer parameters: {0}")]
    InvalidParams(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    /// Inference sequencing misuse, e.g. a residual step before any keyframe.
    #[error("sequencing error: {0}")]
    Sequencing(String),

    #[error("bit-width policy error: {0}")]
    Policy(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Malformed notation string, pattern name, or similar user input.
    #[error("parse error: {0}")]
    Parse(String),

    /// A malformed tensor file (bad magic, truncated payload, ...).
    #[error("invalid tensor file {path}: {reason}")]
    TensorFile { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Attach a path to a bare I/O error.
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
