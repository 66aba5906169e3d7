use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("KL divergence undefined: q[{index}] = 0 but p[{index}] = {p_val} > 0")]
    DivergenceUndefined { index: usize, p_val: f64 },

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NumericFailure { step: usize, detail: String },

    #[error("mask has no foreground pixels")]
    NoForeground,

    #[error("foreground boxes cover the entire image; no background left")]
    EmptyBackground,

    #[error("sample {sample_id}: strategy {strategy} unavailable, missing {missing}")]
    StrategyUnavailable {
        sample_id: String,
        strategy: String,
        missing: String,
    },

    #[error("sample {sample_id}: {source}")]
    Sample {
        sample_id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("generation failed for request {request}: {message}")]
    Generation { request: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: image error: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{location}: parse error at line {line}, column {column}: {message}")]
    Parse {
        location: String,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("{location}: validation failed at {field}: {message}")]
    Validation {
        location: String,
        field: String,
        message: String,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(location: impl Into<String>, err: &serde_json::Error) -> Self {
        Error::Parse {
            location: location.into(),
            line: err.line(),
            column: err.column(),
            message: err.to_string(),
        }
    }

    pub(crate) fn for_sample(self, sample_id: &str) -> Self {
        match self {
            e @ Error::StrategyUnavailable { .. } | e @ Error::Sample { .. } => e,
            other => Error::Sample {
                sample_id: sample_id.to_string(),
                source: Box::new(other),
            },
        }
    }
}
