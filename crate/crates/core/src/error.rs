use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by dataset generation, model construction, training and
/// evaluation. CLI exit codes map `Config`/`Refusal` to 2 and
/// `Diverged`/`Leakage` to 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("shape mismatch between {left} and {right} in {context}")]
    Shape {
        left: String,
        right: String,
        context: String,
    },

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("unknown class name `{0}`")]
    UnknownClass(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("degenerate segment: start {start} >= end {end}")]
    DegenerateSegment { start: f64, end: f64 },

    #[error("no ground-truth targets: {0}")]
    EmptyTargets(String),

    #[error("infeasible assignment: {queries} queries < {targets} targets")]
    Infeasible { queries: usize, targets: usize },

    #[error("training diverged at step {step}: {diagnostics}")]
    Diverged { step: usize, diagnostics: String },

    #[error("unseen-class leakage: `{0}` requested by the text encoder during training")]
    Leakage(String),

    #[error("refusing to proceed: {0}")]
    Refusal(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),

    #[error("invalid file format: {0}")]
    Format(String),
}

impl Error {
    pub fn config(field: &str, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.to_string(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
