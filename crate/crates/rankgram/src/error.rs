//! Crate-wide error type.

use crate::model::Violation;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty reduction")]
    EmptyReduction,

    #[error("dimension mismatch: {context} (expected {expected}, got {got})")]
    DimMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid dimensions: {0}")]
    InvalidDims(String),

    #[error("token id {id} out of range at position {position} (vocabulary size {vocab_size})")]
    TokenOutOfRange {
        position: usize,
        id: usize,
        vocab_size: usize,
    },

    #[error("sentence of length {len} rejected: {reason}")]
    SentenceLength { len: usize, reason: &'static str },

    #[error("zero-probability sequence: {0}")]
    ZeroProbability(String),

    #[error("enumeration budget exceeded: need {needed}, budget {budget}")]
    BudgetExceeded { needed: u128, budget: u64 },

    #[error("invalid model: {}", format_violations(.0))]
    InvalidModel(Vec<Violation>),

    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),

    #[error("model file error: {0}")]
    ModelFile(String),

    #[error("corpus error at line {line}: {msg}")]
    Corpus { line: usize, msg: String },

    #[error("gold mismatch at sentence {index}: {msg}")]
    GoldMismatch { index: usize, msg: String },

    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    #[error("end-of-sentence token unreachable after {attempts} sampling attempts")]
    EosUnreachable { attempts: usize },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn format_violations(vs: &[Violation]) -> String {
    vs.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

pub type Result<T> = std::result::Result<T, Error>;
