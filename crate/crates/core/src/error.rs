use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the registration engine and its file formats.
#[derive(Error, Debug)]
pub enum Error {
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),

    #[error("point at depth {z} mm is behind or too close to the source")]
    PointBehindSource { z: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no voxel survived surface extraction")]
    EmptySurface,

    #[error("primitive {index} extends outside the volume bounds")]
    PrimitiveOutOfBounds { index: usize },

    #[error("image of size {width}x{height} is too small (need at least 3x3)")]
    ImageTooSmall { width: usize, height: usize },

    #[error("all correspondence weights are zero")]
    DegenerateWeights,

    #[error("linear system has no rows with positive weight")]
    EmptySystem,

    #[error("point set is empty")]
    EmptyPointSet,

    #[error("reduction factor is undefined for a zero initial error")]
    UndefinedReduction,

    #[error("bisection did not reach target mTRE {target} mm after {iterations} iterations")]
    BisectionFailed { target: f64, iterations: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed header: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("{path}: payload has {actual} bytes, header requires {expected}")]
    TruncatedPayload {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("{path}: payload has {actual} bytes, more than the {expected} the header dimensions describe")]
    DimensionMismatch {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("{path}: byte order '{found}' is not supported (expected 'little')")]
    ByteOrderMismatch { path: PathBuf, found: String },

    #[error("{path}: malformed pose record: {reason}")]
    MalformedPose { path: PathBuf, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
