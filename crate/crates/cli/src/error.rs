use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad experiment or recipe file, anchored to a line of it.
    #[error("{}:{line}: {message}", path.display())]
    Config { path: PathBuf, line: usize, message: String },
    #[error("{context}: {source}")]
    Runtime {
        context: String,
        #[source]
        source: cpt_core::Error,
    },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config { .. } => 2,
            _ => 1,
        }
    }

    pub(crate) fn config(path: &Path, line: usize, message: impl Into<String>) -> Self {
        CliError::Config { path: path.to_path_buf(), line, message: message.into() }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Attaches a context string to core and io failures.
pub(crate) trait Context<T> {
    fn context(self, what: impl FnOnce() -> String) -> CliResult<T>;
}

impl<T> Context<T> for cpt_core::Result<T> {
    fn context(self, what: impl FnOnce() -> String) -> CliResult<T> {
        self.map_err(|source| CliError::Runtime { context: what(), source })
    }
}

impl<T> Context<T> for std::io::Result<T> {
    fn context(self, what: impl FnOnce() -> String) -> CliResult<T> {
        self.map_err(|source| CliError::Io { context: what(), source })
    }
}
