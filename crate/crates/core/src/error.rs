use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the core engines.
///
/// Every variant carries enough context to be surfaced verbatim by the CLI,
/// prefixed with the module that produced it.
#[derive(Debug, Error)]
pub enum Error {
    #[error("trace: cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("trace: {reason} at line {line}")]
    Malformed { line: usize, reason: String },

    #[error("trace: {0}")]
    Trace(String),

    #[error("sg-miner: {0}")]
    Miner(String),

    #[error("sg-miner: embedding missing for gram '{0}'")]
    EmbeddingMissing(String),

    #[error("sg-miner: embedding endpoint: {0}")]
    Endpoint(String),

    #[error("classifier: normalization version mismatch (set uses '{found}', engine uses '{expected}')")]
    NormalizationVersion { expected: String, found: String },

    #[error("metrics: {0}")]
    Metrics(String),

    #[error("credit: {0}")]
    Credit(String),

    #[error("sim: {0}")]
    Sim(String),

    #[error("judge: {0}")]
    Judge(String),

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("{context}: {source}")]
    Csv {
        context: String,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    /// True for errors caused by invalid inputs or parameters, as opposed to
    /// I/O or service failures.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Io { .. } | Error::Endpoint(_) | Error::Judge(_) | Error::Csv { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
