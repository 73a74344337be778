// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

/// Errors surfaced by file loading, configuration and experiment runs.
#[derive(Debug, thiserror::Error)]
pub enum RunError {
    /// Bad or inconsistent configuration; the CLI exits with 2.
    #[error("config error: {0}")]
    Config(String),

    /// A required input file is missing or unreadable; exit 2.
    #[error("cannot read {path}: {source}")]
    Input {
        path: PathBuf,
        source: std::io::Error,
    },

    /// A file parsed but its contents are invalid; exit 2.
    #[error("invalid {path}: {message}")]
    Format { path: PathBuf, message: String },

    /// Writing outputs failed; exit 1.
    #[error("cannot write {path}: {source}")]
    Output {
        path: PathBuf,
        source: std::io::Error,
    },

    /// Failure inside the engine while running an experiment; exit 1.
    #[error(transparent)]
    Engine(#[from] actpatch_core::Error),
}

impl RunError {
    pub fn format(path: impl Into<PathBuf>, message: impl std::fmt::Display) -> Self {
        RunError::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// Process exit code: 2 for configuration/input problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Input { .. } | RunError::Format { .. } => 2,
            RunError::Output { .. } | RunError::Engine(_) => 1,
        }
    }
}

pub type RunResult<T> = Result<T, RunError>;
