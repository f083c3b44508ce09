use std::fmt;
use std::path::Path;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// A single rejected input row, identified by its 1-based line number.
#[derive(Debug, Clone)]
pub struct RowError {
    pub line: u64,
    pub message: String,
}

impl fmt::Display for RowError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

/// Error categories map onto CLI exit codes: schema problems (malformed
/// files, bad headers, invalid geometry) exit 2, violated preconditions
/// exit 3, and IO/runtime failures exit 4.
#[derive(Debug, Error)]
pub enum Error {
    /// The file does not match its documented schema (missing column,
    /// unparseable structure, bad header).
    #[error("schema error in {path}: {message}")]
    Schema { path: String, message: String },

    /// Individual rows failed validation. All offending rows are collected
    /// (up to a cap) so one pass reports every problem.
    #[error("{path}: {} invalid row(s); {}", rows.len(), format_rows(rows))]
    InvalidRows { path: String, rows: Vec<RowError> },

    /// A census polygon failed geometric validation.
    #[error("invalid geometry for {cbg_id}: {message}")]
    Geometry { cbg_id: String, message: String },

    /// An operation's documented precondition does not hold.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Too many bootstrap replicates failed to produce estimates.
    #[error("bootstrap failed: {failed} of {total} replicates errored (>{}%)", 1)]
    BootstrapFailed { failed: usize, total: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("runtime error: {0}")]
    Runtime(String),
}

fn format_rows(rows: &[RowError]) -> String {
    const SHOWN: usize = 8;
    let mut s = rows
        .iter()
        .take(SHOWN)
        .map(|r| r.to_string())
        .collect::<Vec<_>>()
        .join("; ");
    if rows.len() > SHOWN {
        s.push_str(&format!("; ... and {} more", rows.len() - SHOWN));
    }
    s
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn schema(path: &Path, message: impl Into<String>) -> Self {
        Error::Schema {
            path: path.display().to_string(),
            message: message.into(),
        }
    }

    /// Process exit code for the CLI: distinct nonzero codes per category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Schema { .. } | Error::InvalidRows { .. } | Error::Geometry { .. } => 2,
            Error::Precondition(_) => 3,
            Error::BootstrapFailed { .. } | Error::Io { .. } | Error::Runtime(_) => 4,
        }
    }
}
