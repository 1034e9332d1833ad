//! Command errors and their exit codes.

use std::path::PathBuf;

use thiserror::Error;

/// Exit status for a bad config or input.
pub const EXIT_CONFIG: i32 = 1;
/// Exit status for a failure while running.
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("cannot read config {path}: {source}")]
    ConfigFile {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] lemo_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::ConfigFile { .. } => EXIT_CONFIG,
            Self::Core(lemo_core::Error::Config(_) | lemo_core::Error::Validation(_)) => EXIT_CONFIG,
            Self::Output { .. } | Self::Core(_) => EXIT_RUNTIME,
        }
    }

    pub(crate) fn output(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Output {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
