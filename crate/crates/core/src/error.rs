use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed header, unknown version, bad magic, or unparseable text input.
    #[error("format error: {0}")]
    Format(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("insufficient samples: need at least 2 tokens, have {0}")]
    InsufficientSamples(u64),

    #[error("pre/post populations differ in {field}: {pre} vs {post}")]
    Pairing {
        field: &'static str,
        pre: String,
        post: String,
    },

    #[error("degenerate spectrum: {0}")]
    DegenerateSpectrum(String),

    #[error("covariance is not positive semi-definite: eigenvalue {value:e} below -{tol:e} * lambda_max")]
    NonPsd { value: f64, tol: f64 },

    #[error("metric requested on a truncated {kind} spectrum without allowing truncation")]
    TruncatedSpectrum { kind: String },

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("{0}")]
    NoDumps(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("write error on {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable kind, used in the CLI error summary.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Format(_) => "format",
            Error::Truncated { .. } => "truncated",
            Error::NonFinite { .. } => "data",
            Error::Data(_) => "data",
            Error::Argument(_) => "argument",
            Error::InsufficientSamples(_) => "insufficient_samples",
            Error::Pairing { .. } => "pairing",
            Error::DegenerateSpectrum(_) => "degenerate_spectrum",
            Error::NonPsd { .. } => "non_psd",
            Error::TruncatedSpectrum { .. } => "truncation",
            Error::UndefinedCorrelation(_) => "undefined_correlation",
            Error::NoDumps(_) => "no_dumps",
            Error::Io { .. } => "io",
            Error::Write { .. } => "write",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}

pub(crate) fn arg(msg: impl Into<String>) -> Error {
    Error::Argument(msg.into())
}
