use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("config: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0} acceptance check(s) failed")]
    Acceptance(usize),
}

impl AppError {
    pub fn config(msg: impl Into<String>) -> Self {
        AppError::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AppError::Io {
            path: path.into(),
            source,
        }
    }

    /// 1 config/IO, 2 numerical, 3 failed acceptance check.
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Config(_) | AppError::Io { .. } | AppError::Csv(_) => 1,
            AppError::Numerical(_) => 2,
            AppError::Acceptance(_) => 3,
        }
    }
}

impl From<mais_core::Error> for AppError {
    fn from(e: mais_core::Error) -> Self {
        AppError::Numerical(e.to_string())
    }
}

pub type AppResult<T> = Result<T, AppError>;
