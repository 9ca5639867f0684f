use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("{op}: {reason}")]
    InvalidShape { op: &'static str, reason: String },

    #[error("{op}: output size would be non-positive ({reason})")]
    NonPositiveOutput { op: &'static str, reason: String },

    #[error("{op}: non-finite value in input")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("backward: output does not depend on any gradient-tracking leaf")]
    Detached,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown parameter {0:?}")]
    UnknownParameter(String),

    #[error("{0}")]
    Parse(#[from] ParseError),

    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("{0}")]
    Geometry(String),

    #[error("path does not exist: {}", .0.display())]
    MissingPath(PathBuf),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("unsupported report format {0:?}")]
    UnsupportedFormat(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, expected: &[usize], got: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }

    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidShape {
            op,
            reason: reason.into(),
        }
    }
}

/// Annotation parsing failures. Line numbers are 1-based.
#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("{source_id}:{line}: odd number of coordinates ({count})")]
    OddTokenCount {
        source_id: String,
        line: usize,
        count: usize,
    },

    #[error("{source_id}:{line}: cannot parse {token:?} as a number")]
    BadNumber {
        source_id: String,
        line: usize,
        token: String,
    },

    #[error("{source_id}: missing key {key:?}")]
    MissingKey { source_id: String, key: String },

    #[error("{source_id}: {reason}")]
    Malformed { source_id: String, reason: String },

    #[error("{source_id}:{line}: lane {lane} has {lane_len} x values but h_samples has {samples}")]
    LengthMismatch {
        source_id: String,
        line: usize,
        lane: usize,
        lane_len: usize,
        samples: usize,
    },
}

#[derive(Debug, Error, PartialEq)]
pub enum CheckpointError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated while reading {0}")]
    Truncated(&'static str),

    #[error("tensor name is not valid UTF-8")]
    BadName,

    #[error("tensor {name:?} has a zero dimension")]
    BadDims { name: String },

    #[error("{0} trailing bytes after last tensor")]
    TrailingBytes(usize),
}
