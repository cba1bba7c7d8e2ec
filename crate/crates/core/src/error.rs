use thiserror::Error;

use crate::model::DecompositionStep;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("field `{0}` must not be empty")]
    EmptyField(&'static str),
    #[error("final answer `{final_answer}` does not match last step answer `{last_step}`")]
    FinalAnswerMismatch { final_answer: String, last_step: String },
    #[error("invalid engine config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("embedding backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("invalid embedding response: {0}")]
    InvalidResponse(String),
}

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template `{template}` is missing a value for slot `{slot}`")]
    MissingSlot { template: String, slot: String },
    #[error("template `{template}` has an unterminated slot marker")]
    Unterminated { template: String },
    #[error("failed to read template `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("LLM backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("LLM backend timed out")]
    BackendTimeout,
    #[error("LLM returned an empty completion")]
    EmptyCompletion,
    #[error("prompt must not be empty")]
    EmptyPrompt,
    #[error("no integer found in judgment reply `{0}`")]
    UnparseableJudgment(String),
    #[error("reply has neither a subquestion nor a final answer: `{0}`")]
    UnparseableDecomposition(String),
}

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error(transparent)]
    InvalidEdit(#[from] ModelError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

#[derive(Debug, Error)]
pub enum LibraryError {
    #[error("case library is frozen")]
    LibraryFrozen,
    #[error("only successful records can be stored")]
    RecordNotSuccessful,
    #[error(transparent)]
    InvalidRecord(#[from] ModelError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("case library I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("case library JSON: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("question must not be empty")]
    EmptyQuestion,
    #[error(transparent)]
    Config(#[from] ModelError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("solve aborted after {} steps: {reason}", partial_trace.len())]
    Aborted {
        reason: String,
        partial_trace: Vec<DecompositionStep>,
    },
}

impl SolveError {
    pub fn is_backend_failure(&self) -> bool {
        matches!(
            self,
            SolveError::Embed(_)
                | SolveError::Llm(LlmError::BackendUnavailable(_))
                | SolveError::Llm(LlmError::BackendTimeout)
                | SolveError::Llm(LlmError::EmptyCompletion)
        )
    }
}

impl From<MemoryError> for SolveError {
    fn from(e: MemoryError) -> Self {
        match e {
            MemoryError::InvalidEdit(m) => SolveError::Config(m),
            MemoryError::Embed(e) => SolveError::Embed(e),
        }
    }
}

impl From<LibraryError> for SolveError {
    fn from(e: LibraryError) -> Self {
        match e {
            LibraryError::Embed(e) => SolveError::Embed(e),
            other => SolveError::Aborted {
                reason: other.to_string(),
                partial_trace: Vec::new(),
            },
        }
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed dataset record {index}: {reason}")]
    Malformed { index: usize, reason: String },
}
