// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

pub type Result<T, E = CpdError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum CpdError {
    /// A user-facing configuration value is out of range.
    #[error("invalid configuration `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    /// Input outside the domain of a loss or metric.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("numeric error in {location}: {message}")]
    Numeric { location: String, message: String },

    #[error("internal invariant violated: {0}")]
    Internal(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl CpdError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn numeric(location: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Numeric {
            location: location.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Self::Config { .. } | Self::Parse { .. } | Self::Validation(_) | Self::Io { .. }
        )
    }
}
