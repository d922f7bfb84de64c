use std::path::PathBuf;

use factornas_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{source_name}: format error at byte offset {offset}: {message}")]
    Format { source_name: String, offset: u64, message: String },
    #[error("{source_name}:{line}: {message}")]
    Config { source_name: String, line: usize, message: String },
    #[error("usage error: {0}")]
    Usage(String),
    #[error("missing artifact {}", .0.display())]
    Missing(PathBuf),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// 1 for runtime and numerical failures, 2 for usage, configuration and input errors.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Core(CoreError::Dimension(_) | CoreError::DegenerateBatch | CoreError::Numerical { .. }) => 1,
            Error::Io { .. } => 1,
            _ => 2,
        }
    }

    pub fn format(source_name: &str, offset: u64, message: impl Into<String>) -> Self {
        Error::Format { source_name: source_name.to_string(), offset, message: message.into() }
    }
}
