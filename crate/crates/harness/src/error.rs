use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Core(#[from] diffnet_core::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    pub(crate) fn config(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        HarnessError::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code: 1 for usage and input problems, 2 for numerical
    /// failures, 3 for failed identifiability or informativity checks.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Core(e) => match e.root() {
                diffnet_core::Error::CheckFailed(_) => 3,
                _ => 2,
            },
            _ => 1,
        }
    }
}
