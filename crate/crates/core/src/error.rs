use std::path::PathBuf;

use crate::store::Attribute;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("line {line}: {source}")]
    AtLine {
        line: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("record {index} (byte offset {offset}): {source}")]
    AtRecord {
        index: u64,
        offset: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("record `{id}`: vector has {got} dimensions, expected {expected}")]
    DimensionMismatch { id: String, expected: usize, got: usize },

    #[error("unknown label `{label}` for attribute {attribute}")]
    UnknownLabel { attribute: Attribute, label: String },

    #[error("label index {index} out of range for {attribute} (cardinality {cardinality})")]
    LabelOutOfRange { attribute: Attribute, index: usize, cardinality: usize },

    #[error("attribute {0} has no vocabulary in this set")]
    UnknownAttribute(Attribute),

    #[error("duplicate record id `{0}`")]
    DuplicateId(String),

    #[error("truncated packed payload at byte offset {offset}: needed {needed} more bytes")]
    Truncated { offset: u64, needed: usize },

    #[error("invalid packed header: {0}")]
    BadHeader(String),

    #[error("invalid vocabulary: {0}")]
    BadVocabulary(String),

    #[error("non-finite value in {0}")]
    NonFiniteInput(String),

    #[error("invalid split fractions: {0}")]
    InvalidFractions(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("class index {index} out of range for {classes} classes")]
    ClassOutOfRange { index: usize, classes: usize },

    #[error("degenerate (near-zero norm) vector: {0}")]
    DegenerateVector(String),

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("empty batch")]
    EmptyBatch,

    #[error("no labeled records: {0}")]
    NoLabeledRecords(String),

    #[error("caption `{0}` has no vector")]
    MissingCaptionVector(String),

    #[error("label `{label}` does not occur in the base image set for {attribute}")]
    AbsentLabel { attribute: Attribute, label: String },

    #[error("every caption for {0} was skipped (empty match sets)")]
    AllCaptionsSkipped(String),

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("non-finite loss ({context}) in batch of {} records", batch_ids.len())]
    NonFiniteLoss { context: String, batch_ids: Vec<String> },

    #[error("record mismatch: {0}")]
    RecordMismatch(String),

    #[error("infeasible synthetic spec: {0}")]
    Infeasible(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn at_line(line: usize, source: Error) -> Self {
        Error::AtLine { line, source: Box::new(source) }
    }

    pub(crate) fn in_file(path: impl Into<PathBuf>, source: Error) -> Self {
        Error::File { path: path.into(), source: Box::new(source) }
    }

    /// True when the error reports a numerical failure rather than bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonFiniteLoss { .. } | Error::NotPositiveDefinite => true,
            Error::File { source, .. } | Error::AtLine { source, .. } | Error::AtRecord { source, .. } => {
                source.is_numerical()
            }
            _ => false,
        }
    }
}
