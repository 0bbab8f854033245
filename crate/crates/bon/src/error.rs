use std::io;

/// Errors surfaced by the harness and the CLI.
#[derive(Debug, thiserror::Error)]
pub enum BonError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}: byte offset {offset}: {message}")]
    Binary {
        path: String,
        offset: usize,
        message: String,
    },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
    #[error("invalid data: {0}")]
    Data(bon_core::Error),
    #[error("step {step}: {source}\nconfig: {config}")]
    Training {
        step: u64,
        source: bon_core::Error,
        config: String,
    },
    #[error("{0}")]
    Runtime(String),
}

impl BonError {
    pub fn io(context: impl Into<String>, source: io::Error) -> Self {
        BonError::Io {
            context: context.into(),
            source,
        }
    }

    /// Process exit code: 1 usage, 2 data, 3 runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            BonError::Usage(_) => 1,
            BonError::Parse { .. } | BonError::Binary { .. } | BonError::Data(_) => 2,
            BonError::Io { .. } => 2,
            BonError::Training { .. } | BonError::Runtime(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, BonError>;
