use thiserror::Error;

use crate::kb::FieldError;

pub type Result<T> = std::result::Result<T, SolarError>;

#[derive(Debug, Error)]
pub enum SolarError {
    #[error("adapter shape error: {0}")]
    AdapterShape(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("labeled data required: sample {index} has no label")]
    LabeledDataRequired { index: usize },

    #[error("evaluation set is empty")]
    EmptyEvalSet,

    #[error("input text is empty")]
    EmptyInput,

    #[error("codec integrity error: {0}")]
    CodecIntegrity(String),

    #[error("decoder schedule error: {0}")]
    Schedule(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty source: {0}")]
    EmptySource(&'static str),

    #[error("training diverged after {} finite epochs", last_finite_trace.len())]
    TrainingDiverged { last_finite_trace: Vec<f64> },

    #[error("strategy failed validation: {}", format_field_errors(.0))]
    Validation(Vec<FieldError>),

    #[error("knowledge base is empty")]
    EmptyKb,

    #[error("chain composition error: {0}")]
    ChainComposition(String),

    #[error("rank error: rank {0} must be even")]
    OddRank(usize),

    #[error("insufficient prompts: need {needed}, have {available}")]
    InsufficientPrompts { needed: usize, available: usize },

    #[error("proposal exhausted after {0} invalid draws")]
    ProposalExhausted(usize),

    #[error("graph too small: {0} node(s)")]
    GraphTooSmall(usize),

    #[error("task spec error: {0}")]
    Spec(String),

    #[error("strategy family {0} has no executor")]
    NotExecutable(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("binary format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn format_field_errors(errs: &[FieldError]) -> String {
    errs.iter()
        .map(|e| e.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
