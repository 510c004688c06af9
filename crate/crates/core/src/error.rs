use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure of an outbound HTTP call.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("{message}")]
pub struct TransportError {
    pub message: String,
    /// Timeouts, connection failures, 429 and 5xx responses.
    pub retryable: bool,
    pub status: Option<u16>,
}

impl TransportError {
    pub fn retryable(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            retryable: true,
            status: None,
        }
    }

    pub fn fatal(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            retryable: false,
            status: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("duplicate chunk id `{0}`")]
    DuplicateChunk(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("transport error after {attempts} attempt(s): {source}")]
    Transport {
        attempts: u32,
        #[source]
        source: TransportError,
    },

    #[error("provider contract violated: {0}")]
    ProviderContract(String),

    #[error("generation contract violated: {0}")]
    Generation(String),

    #[error("prompt exceeds token budget of {budget} ({needed} tokens without any document)")]
    TokenBudget { budget: usize, needed: usize },

    #[error("construction error: {0}")]
    Construction(String),

    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Machine-readable code used in service error payloads.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io_error",
            Error::Parse { .. } => "parse_error",
            Error::Invalid(_) => "invalid_input",
            Error::DuplicateChunk(_) => "duplicate_chunk",
            Error::Domain(_) => "domain_error",
            Error::UndefinedMetric(_) => "undefined_metric",
            Error::Transport { .. } => "transport_error",
            Error::ProviderContract(_) => "provider_contract",
            Error::Generation(_) => "generation_error",
            Error::TokenBudget { .. } => "token_budget",
            Error::Construction(_) => "construction_error",
            Error::Config(_) => "config_error",
        }
    }
}
