use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
///
/// The variants are grouped so the CLI can map them onto its exit codes:
/// configuration problems, data problems and training divergence.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("text ingestion failed at byte offset {offset}: invalid UTF-8")]
    Ingest { offset: usize },

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("symbol {symbol:?} is not covered by the {context}")]
    Uncovered { symbol: char, context: String },

    #[error("render failed for string #{index} ({text:?}): {source}")]
    RenderItem {
        index: usize,
        text: String,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid parameter range `{name}`: {message}")]
    Range { name: String, message: String },

    #[error("manifest {path}:{line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("image of width {width} is narrower than the backbone minimum {minimum}")]
    TooNarrow { width: usize, minimum: usize },

    #[error("target {target:?} needs {steps} decode steps but max_decode_len is {max}")]
    TargetTooLong {
        target: String,
        steps: usize,
        max: usize,
    },

    #[error("non-finite loss {loss} (batch of {batch_size}, step {step})")]
    NonFiniteLoss {
        loss: f64,
        batch_size: usize,
        step: u64,
    },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("training diverged at cycle {cycle}: {reason} (last good checkpoint: {last_good:?})")]
    Divergence {
        cycle: usize,
        reason: String,
        last_good: Option<PathBuf>,
    },

    #[error("run interrupted during cycle {cycle}")]
    Interrupted { cycle: usize },

    #[error("{0}")]
    Empty(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
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
