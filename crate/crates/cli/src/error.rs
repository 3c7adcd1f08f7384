use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("ConfigError: {0}")]
    Config(String),

    #[error("IoError: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("DataError: {context}: {source}")]
    Core {
        context: String,
        #[source]
        source: volnp_core::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Core { .. } => 4,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub trait IoContext<T> {
    fn at(self, path: &Path) -> CliResult<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: &Path) -> CliResult<T> {
        self.map_err(|source| CliError::Io { path: path.to_path_buf(), source })
    }
}

pub trait CoreContext<T> {
    fn context(self, what: impl FnOnce() -> String) -> CliResult<T>;
}

impl<T> CoreContext<T> for volnp_core::Result<T> {
    fn context(self, what: impl FnOnce() -> String) -> CliResult<T> {
        self.map_err(|source| match source {
            volnp_core::Error::Io(e) => CliError::Io { path: PathBuf::from(what()), source: e },
            source => CliError::Core { context: what(), source },
        })
    }
}
