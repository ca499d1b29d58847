//! Errors split by exit code: usage problems exit 2, everything else 1.

use std::path::{Path, PathBuf};

use thiserror::Error;

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid {flag}: {message}")]
    Usage { flag: &'static str, message: String },

    #[error(transparent)]
    Core(#[from] siphi_core::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn usage(flag: &'static str, message: impl Into<String>) -> Self {
        CliError::Usage {
            flag,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage { .. } => 2,
            _ => 1,
        }
    }
}

/// Fail early, naming the flag, if an input file is missing.
pub fn require_file(flag: &'static str, path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::usage(flag, format!("{} is not a readable file", path.display())))
    }
}
