use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("non-finite value in parameter `{param}`")]
    Numeric { param: String },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("{what} = {value} is outside the legal range {range}")]
    Range {
        what: &'static str,
        value: f64,
        range: &'static str,
    },

    #[error("batch-hard mining failed: anchor {anchor} has no {missing} in the batch")]
    Mining { anchor: usize, missing: &'static str },

    #[error("invalid state: {0}")]
    State(String),

    #[error(
        "calibration failed: {reason} (in-distribution: n={in_count}, median={in_median}; \
         deviated: n={dev_count}, median={dev_median})"
    )]
    Calibration {
        reason: String,
        in_count: usize,
        in_median: f64,
        dev_count: usize,
        dev_median: f64,
    },

    #[error("format error in {}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::Dimension {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// The innermost error, looking through stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}
