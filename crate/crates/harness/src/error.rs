use thiserror::Error;

/// Errors surfaced by CLI commands, each mapped to a process exit code.
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{failed} of {total} examples failed (limit {limit_pct}%)")]
    ExcessiveFailures {
        failed: usize,
        total: usize,
        limit_pct: usize,
    },
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Usage(_) => 1,
            HarnessError::Data(_) => 2,
            HarnessError::ExcessiveFailures { .. } => 3,
        }
    }

    pub fn data(context: impl std::fmt::Display, err: impl std::fmt::Display) -> Self {
        HarnessError::Data(format!("{context}: {err}"))
    }
}
