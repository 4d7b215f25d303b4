use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the identification toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    #[error("parameter {value} at index {index} lies outside the knot range [{lo}, {hi}]")]
    OutOfDomain {
        index: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("term `{term}` evaluated outside its domain: {reason}")]
    TermDomain { term: String, reason: String },

    #[error("term `{term}` failed at sample {sample}: {reason}")]
    LibraryEval {
        sample: usize,
        term: String,
        reason: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("integration blew up at t = {time}")]
    BlowUp { time: f64 },

    #[error("control point initialization failed: {0}")]
    Initialization(String),

    #[error("every candidate term was pruned; lower the threshold")]
    EmptyModel,

    #[error("optimization diverged at iteration {iteration}: loss {loss:.3e} vs best {best:.3e}")]
    Divergence {
        iteration: usize,
        loss: f64,
        best: f64,
    },

    #[error("non-finite loss (data {data}, physics {physics}, reg {reg}, sparse {sparse})")]
    NonFiniteLoss {
        data: f64,
        physics: f64,
        reg: f64,
        sparse: f64,
    },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
