use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Check(String),
    #[error(transparent)]
    Core(#[from] vmoba_core::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 1 check failure, 2 config or usage error, 3 I/O error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Check(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Core(vmoba_core::Error::Tensor(vmoba_core::tensor::TensorError::Io(_))) => 3,
            CliError::Core(vmoba_core::Error::Diverged { .. }) => 1,
            CliError::Core(_) => 2,
        }
    }
}

impl From<vmoba_core::tensor::TensorError> for CliError {
    fn from(e: vmoba_core::tensor::TensorError) -> Self {
        CliError::Core(e.into())
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
