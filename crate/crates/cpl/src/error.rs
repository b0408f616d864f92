use std::path::PathBuf;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    /// File system or serialization failure.
    pub const IO: i32 = 1;
    /// Bad configuration, flags or arguments; nothing was run.
    pub const CONFIG: i32 = 2;
    /// Training diverged. Logs and summary are still written.
    pub const DIVERGED: i32 = 3;
    /// A sweep finished but some of its runs failed.
    pub const PARTIAL: i32 = 4;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: malformed file: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error(transparent)]
    Core(#[from] cpl_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } | CliError::Format { .. } => exit::IO,
            CliError::Config(_) => exit::CONFIG,
            CliError::Core(cpl_core::Error::InvalidArgument(_)) => exit::CONFIG,
            CliError::Core(_) => exit::IO,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl std::fmt::Display) -> CliError {
        CliError::Format { path: path.into(), msg: msg.to_string() }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
