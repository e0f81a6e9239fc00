use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape error in {op}: {msg}")]
    Shape { op: &'static str, msg: String },
    #[error("vocabulary error: attribute `{attribute}` has no id {id} (vocab size {vocab_size})")]
    Vocabulary {
        attribute: String,
        id: usize,
        vocab_size: usize,
    },
    #[error("unknown token id {id} (vocab size {vocab_size})")]
    UnknownToken { id: usize, vocab_size: usize },
    #[error("label {label} out of range for task {task} with {n_classes} classes")]
    LabelOutOfRange {
        task: usize,
        label: usize,
        n_classes: usize,
    },
    #[error("unknown class label `{0}`")]
    UnknownClass(String),
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("non-finite gradient in `{param}` at step {step}")]
    NonFiniteGradient { param: String, step: usize },
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("out of memory: {what} needs {required_bytes} bytes, budget is {budget_bytes} bytes")]
    OutOfMemory {
        what: String,
        required_bytes: u128,
        budget_bytes: u128,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::Dimension {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

pub(crate) fn shape_err(op: &'static str, msg: impl Into<String>) -> Error {
    Error::Shape {
        op,
        msg: msg.into(),
    }
}
