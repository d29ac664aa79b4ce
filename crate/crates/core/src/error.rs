use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the lab.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("shape mismatch in {op}: expected {expected:?}, got {got:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("head dimension must be even for rotary encoding, got {0}")]
    OddHeadDim(usize),

    #[error("cross-entropy called with every position masked")]
    AllMasked,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("donor cache covers {donor} positions but the sequence has {tokens}")]
    DonorLength { donor: usize, tokens: usize },

    #[error("patch out of range: {0}")]
    PatchOutOfRange(String),

    #[error("bad magic: checkpoint does not start with CLABCKP1")]
    BadMagic,

    #[error("truncated tensor `{name}`: header declares {declared} floats but only {available} are present")]
    TruncatedTensor {
        name: String,
        declared: usize,
        available: usize,
    },

    #[error("tensor `{name}` has shape {got:?} but the config implies {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("bad checkpoint header: {0}")]
    BadHeader(String),

    #[error("character {0:?} is not in the prompt alphabet")]
    Tokenize(char),

    #[error("few-shot examples must come from the query's class {expected}, found {found}")]
    MixedClasses { expected: String, found: String },

    #[error("expected {expected} few-shot examples, got {got}")]
    ExampleCount { expected: usize, got: usize },

    #[error("invalid task class: {0}")]
    InvalidClass(String),

    #[error("no counterfactual found for {a} + {b} after {draws} draws")]
    CounterfactualExhausted { a: u64, b: u64, draws: usize },

    #[error("answer span of length {span} does not match {targets} target tokens")]
    SpanMismatch { span: usize, targets: usize },

    #[error("zero variance input to pearson correlation")]
    ZeroVariance,

    #[error("perplexity {perplexity} must be smaller than the number of points {n}")]
    PerplexityTooLarge { perplexity: f64, n: usize },

    #[error("{0}")]
    Analysis(String),

    #[error("non-finite loss at step {step} (batch seed {batch_seed})")]
    NonFiniteLoss { step: usize, batch_seed: u64 },

    #[error("invalid training config: {0}")]
    InvalidTrainConfig(String),

    #[error("parse error in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LabError {
    /// True for errors caused by bad arguments or configuration rather than
    /// by a failure while running.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            LabError::Usage(_)
                | LabError::InvalidConfig(_)
                | LabError::InvalidTrainConfig(_)
                | LabError::InvalidClass(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
