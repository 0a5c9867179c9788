use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid resolution: {0}")]
    InvalidResolution(String),

    #[error("partition does not align with the grid: {0}")]
    Alignment(String),

    #[error("kernel normalization failed: {0}")]
    Normalization(String),

    #[error("time step violates the stability bound: {0}")]
    Stability(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("diagnostic unavailable: {0}")]
    DiagnosticUnavailable(String),

    #[error("snapshot mismatch: {0}")]
    SnapshotMismatch(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse error classes reported by the command line front end.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Alignment,
    Stability,
    Normalization,
    Io,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Alignment => 3,
            ErrorCategory::Stability => 4,
            ErrorCategory::Normalization => 5,
            ErrorCategory::Io => 6,
        }
    }
}

impl fmt::Display for ErrorCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            ErrorCategory::Config => "config",
            ErrorCategory::Alignment => "alignment",
            ErrorCategory::Stability => "stability",
            ErrorCategory::Normalization => "normalization",
            ErrorCategory::Io => "io",
        };
        f.write_str(name)
    }
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Alignment(_) => ErrorCategory::Alignment,
            Error::Stability(_) => ErrorCategory::Stability,
            Error::Normalization(_) => ErrorCategory::Normalization,
            Error::Io(_) | Error::Csv(_) | Error::Json(_) => ErrorCategory::Io,
            Error::InvalidResolution(_)
            | Error::GridMismatch(_)
            | Error::Config(_)
            | Error::DiagnosticUnavailable(_)
            | Error::SnapshotMismatch(_)
            | Error::Precondition(_) => ErrorCategory::Config,
        }
    }
}
