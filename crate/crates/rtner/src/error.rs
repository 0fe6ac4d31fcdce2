//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: malformed line: {reason}")]
    MalformedLine {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("{path}:{line}: unknown tag prefix in {tag:?} (expected O or I-<label>)")]
    UnknownTagPrefix {
        path: String,
        line: usize,
        tag: String,
    },

    #[error("mention span [{start}, {end}) out of bounds for sentence {sentence_id} of {len} tokens")]
    SpanOutOfBounds {
        sentence_id: String,
        start: usize,
        end: usize,
        len: usize,
    },

    #[error("duplicate sentence id {id} in split {split}")]
    DuplicateSentenceId { id: String, split: String },

    #[error("no sentences parsed from {path}")]
    NoSentencesParsed { path: String },

    #[error("sentence {sentence_id}: overlapping mentions with different labels ({a} vs {b}) cannot be expressed in IO tags")]
    OverlappingMentions {
        sentence_id: String,
        a: String,
        b: String,
    },

    #[error("tag/token length mismatch: {tags} tags vs {tokens} tokens")]
    TagLengthMismatch { tags: usize, tokens: usize },

    #[error("invalid tag {tag:?}: {reason}")]
    InvalidTag { tag: String, reason: String },

    #[error("label {label} has only {available} entities in the split, needs {needed}")]
    InsufficientEntities {
        label: String,
        available: usize,
        needed: usize,
    },

    #[error("cannot subsample {requested} sentences from a split of {available}")]
    SubsampleTooLarge { requested: usize, available: usize },

    #[error("embedding dimension mismatch: query is {query_dim}, pool vector {pool_id} is {pool_dim}")]
    DimensionMismatch {
        query_dim: usize,
        pool_id: String,
        pool_dim: usize,
    },

    #[error("embedding provider mismatch: {a} vs {b}")]
    ProviderMismatch { a: String, b: String },

    #[error("embedding vector contains a non-finite value")]
    NonFiniteEmbedding,

    #[error("prompt style {style} requires {what}")]
    StyleInputMismatch { style: String, what: String },

    #[error("cannot render a prompt with zero labels")]
    NoLabels,

    #[error("{0} label marker pairs available, {1} labels requested")]
    TooManyLabelsForMarkers(usize, usize),

    #[error("gateway backend failed for query {query_id}: {reason}")]
    GatewayFailure { query_id: String, reason: String },

    #[error("backend call failed after {attempts} attempts: {last_error}")]
    RetriesExhausted { attempts: u32, last_error: String },

    #[error("backend returned HTTP {status}: {body}")]
    HttpStatus { status: u16, body: String },

    #[error("malformed backend response: {0}")]
    MalformedResponse(String),

    #[error("backend configuration error: {0}")]
    BackendConfig(String),

    #[error("invalid chat request: {0}")]
    InvalidRequest(String),

    #[error("duplicate query id {0} in predictions")]
    DuplicateQueryId(String),

    #[error("prediction references unknown query id {0}")]
    UnknownQueryId(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("run aborted: {failed} of {total} queries failed (threshold {threshold_pct}%)")]
    TooManyQueryFailures {
        failed: usize,
        total: usize,
        threshold_pct: u8,
    },

    #[error("cannot compare runs: {0}")]
    IncomparableRuns(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("http error: {0}")]
    Http(#[from] reqwest::Error),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI, per the documented contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidRequest(_) | Error::BackendConfig(_) => 2,
            Error::MalformedLine { .. }
            | Error::UnknownTagPrefix { .. }
            | Error::SpanOutOfBounds { .. }
            | Error::DuplicateSentenceId { .. }
            | Error::NoSentencesParsed { .. }
            | Error::Dataset(_) => 3,
            Error::TooManyQueryFailures { .. }
            | Error::RetriesExhausted { .. }
            | Error::HttpStatus { .. }
            | Error::GatewayFailure { .. } => 4,
            _ => 1,
        }
    }
}
