use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] swd_core::Error),

    /// Rejected configuration, naming the offending key.
    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    /// Unreadable, corrupted or incompatible checkpoint.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;
pub const EXIT_COLLAPSE: i32 = 5;

impl HarnessError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        use swd_core::Error as E;
        match self {
            HarnessError::Config { .. } | HarnessError::Core(E::Config(_)) => EXIT_CONFIG,
            HarnessError::Checkpoint(_)
            | HarnessError::Core(E::Data(_) | E::Format { .. } | E::DegenerateBatch(_)) => EXIT_DATA,
            HarnessError::Core(E::Divergence { .. }) => EXIT_DIVERGENCE,
            HarnessError::Core(E::StructuralCollapse(_)) => EXIT_COLLAPSE,
            _ => EXIT_OTHER,
        }
    }
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Io(e.to_string())
    }
}
