use std::io;

use thiserror::Error;

use crate::score::ImportanceMode;
use crate::trace::Violation;

/// Errors raised while decoding or encoding a `.d2ht` container.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("not a trace file")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("corrupt payload (crc32 expected {expected:#010x}, found {found:#010x})")]
    CorruptPayload { expected: u32, found: u32 },
    #[error("unexpected end of file at byte offset {offset}")]
    UnexpectedEof { offset: usize },
    #[error("{count} trailing bytes after checksum at byte offset {offset}")]
    TrailingBytes { offset: usize, count: usize },
    #[error("invalid metadata: {0}")]
    InvalidMetadata(String),
    #[error("invalid trace: {}", join_violations(.0))]
    InvalidTrace(Vec<Violation>),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

/// Errors raised by scoring operations (score engine and baselines).
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoreError {
    #[error("drift unavailable: trace lacks {0} attention")]
    DriftUnavailable(ImportanceMode),
    #[error("drift undefined for single-layer trace")]
    SingleLayer,
    #[error("empty key token set")]
    EmptyKeySet,
    #[error("key token index {index} out of range for {tokens} tokens")]
    KeyOutOfRange { index: usize, tokens: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("temperature mismatch between trace and config (trace {trace}, config {config})")]
    TemperatureMismatch { trace: f32, config: f64 },
    #[error("CoE requires layer-0 states")]
    MissingEmbeddingLayer,
    #[error("max_prob is zero at token {0}; perplexity undefined")]
    ZeroMaxProb(usize),
    #[error("trace {trace_id}: {source}")]
    InTrace {
        trace_id: String,
        #[source]
        source: Box<ScoreError>,
    },
}

impl ScoreError {
    pub(crate) fn in_trace(self, trace_id: &str) -> Self {
        ScoreError::InTrace {
            trace_id: trace_id.to_owned(),
            source: Box::new(self),
        }
    }

    /// Strips any `InTrace` wrapping.
    pub fn root(&self) -> &ScoreError {
        match self {
            ScoreError::InTrace { source, .. } => source.root(),
            other => other,
        }
    }
}

/// Errors raised by the evaluation metrics.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("AUROC undefined: need both classes")]
    NeedBothClasses,
    #[error("AUPR undefined: no positive samples")]
    NoPositives,
    #[error("non-finite score at entry {0}")]
    NonFiniteScore(usize),
    #[error("no labeled records")]
    NoLabeledRecords,
}
