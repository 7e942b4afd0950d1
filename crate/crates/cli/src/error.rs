use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// The config file does not parse or names an unknown key.
    #[error("config error in {}: {message} (line {line}, column {column})", path.display())]
    Config {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    /// Artifacts are missing, locked or belong to another config.
    #[error("state error: {0}")]
    State(String),

    #[error(transparent)]
    Core(#[from] untwin_core::Error),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn state(msg: impl Into<String>) -> Self {
        CliError::State(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Self {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    /// Process exit code: 2 for config problems, 3 for state, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config { .. } => 2,
            CliError::State(_) => 3,
            _ => 1,
        }
    }
}
