//! Lab-side errors and their process exit codes.

use std::path::{Path, PathBuf};

/// Anything a command can fail with. Exit codes: configuration, path, and
/// file-format problems are 2; numerical aborts inside the algorithms are 3.
#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config: {0}")]
    Config(String),

    /// A numerical check came back outside tolerance.
    #[error("numerical check failed: {0}")]
    Numeric(String),

    #[error("{path}: line {line} (byte offset {offset}): {msg}")]
    Malformed {
        path: PathBuf,
        line: usize,
        offset: u64,
        msg: String,
    },

    #[error(transparent)]
    Core(#[from] apd_core::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;

impl LabError {
    /// Wrap an io::Error with the path it concerns.
    pub fn io(path: &Path) -> impl FnOnce(std::io::Error) -> LabError + '_ {
        move |source| LabError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Numeric(_) => 3,
            LabError::Core(e) => match e {
                apd_core::Error::Diverged { .. }
                | apd_core::Error::TrainingNan { .. }
                | apd_core::Error::NonFinite(_)
                | apd_core::Error::FitFailed(_) => 3,
                _ => 2,
            },
            _ => 2,
        }
    }
}
