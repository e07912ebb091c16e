use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the grounding pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("empty input")]
    EmptyInput,

    #[error("empty feature range {start}..{end}")]
    EmptyRange { start: usize, end: usize },

    #[error("invalid span [{start}, {end})")]
    InvalidSpan { start: f64, end: f64 },

    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic {
        path: PathBuf,
        expected: &'static str,
    },

    #[error("truncated file {path}: expected {expected} bytes, found {actual}")]
    TruncatedFile {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("non-finite value at index {index} in {path}")]
    NonFiniteValue { path: PathBuf, index: usize },

    #[error("zero feature dimension in {path}")]
    ZeroDim { path: PathBuf },

    #[error("manifest line {line}: missing field `{field}`")]
    MissingField { line: usize, field: String },

    #[error("manifest line {line}: {message}")]
    MalformedLine { line: usize, message: String },

    #[error("manifest line {line}: cannot resolve feature file {path}: {source}")]
    UnresolvedFeatureFile {
        line: usize,
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("query {query_id}: ground truth [{start}, {end}) outside video duration {duration}")]
    GtOutOfRange {
        query_id: String,
        start: f64,
        end: f64,
        duration: f64,
    },

    #[error("video {video_id}: fps {found} conflicts with previously seen {expected}")]
    InconsistentFps {
        video_id: String,
        expected: f64,
        found: f64,
    },

    #[error("invalid synthetic corpus spec: {0}")]
    InvalidSpec(String),

    #[error("invalid window length {0} (must be >= 2)")]
    InvalidWindowLength(usize),

    #[error("no negative window available")]
    NoNegativeWindow,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("unknown window index {index} (video has {count} windows)")]
    UnknownWindowIndex { index: usize, count: usize },

    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),

    #[error("need at least 3 distinct x values for a regression, got {0}")]
    InsufficientPoints(usize),

    #[error("empty query set")]
    EmptyQuerySet,

    #[error("config: {0}")]
    Config(String),

    #[error("unknown video id {0}")]
    UnknownVideo(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
