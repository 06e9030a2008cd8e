//! Crate-wide error and result types.

use crate::datamodel::Violation;

/// Convenient alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by dataset ingest, model training, and encoding.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json sidecar error: {0}")]
    Json(#[from] serde_json::Error),

    /// File does not start with the expected magic bytes.
    #[error("not a {expected} file")]
    BadMagic { expected: &'static str, found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    /// File ended before the declared payload was complete.
    #[error("unexpected end at image {image}")]
    TruncatedDataset { image: u64 },

    #[error("unexpected end of file")]
    Truncated,

    /// A model file holds a different kind of model than requested.
    #[error("model kind mismatch: expected {expected}, file holds kind byte {found}")]
    KindMismatch { expected: &'static str, found: u8 },

    /// Records rejected by `write_dataset`; every violation is listed.
    #[error("invalid records: {}", format_violations(.0))]
    InvalidRecords(Vec<(usize, Violation)>),

    /// Encodings with differing (level, k, dim) cannot share one file.
    #[error("mixed encoding shapes: ({0}) vs ({1})")]
    MixedEncodingShapes(String, String),

    #[error("vector length {found} does not match expected dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("sample of {sample} descriptors is smaller than target dimension {dim}")]
    SampleTooSmall { sample: usize, dim: usize },

    /// All sampled descriptors are identical; no principal directions exist.
    #[error("degenerate covariance")]
    DegenerateCovariance,

    #[error("only {distinct} distinct points for {k} centroids")]
    TooFewDistinctPoints { distinct: usize, k: usize },

    #[error("empty point set")]
    EmptyPointSet,

    #[error("dataset contains no regions")]
    EmptyDataset,

    #[error("need at least 2 labeled encodings, got {0}")]
    TooFewSamples(usize),

    #[error("{0}")]
    InvalidInput(String),
}

fn format_violations(violations: &[(usize, Violation)]) -> String {
    violations
        .iter()
        .map(|(record, v)| format!("record {record}: {v}"))
        .collect::<Vec<_>>()
        .join("; ")
}
