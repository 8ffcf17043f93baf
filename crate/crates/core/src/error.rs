use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    /// `row` is 1-based and counts data rows (the header is row 0).
    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("model fit failed: {0}")]
    Fit(String),

    #[error("fold {fold} training split is missing {variable} level {level}; reseed or reduce the fold count")]
    Fold {
        fold: usize,
        variable: &'static str,
        level: usize,
    },

    #[error("training rows are missing {variable} level {level}")]
    MissingLevel { variable: &'static str, level: usize },

    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    #[error("study error: {0}")]
    Study(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by malformed user input rather than runtime
    /// failure. The CLI maps these to exit code 2.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Schema(_) | Error::Parse { .. } | Error::Argument(_)
        )
    }
}
