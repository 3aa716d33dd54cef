use std::path::PathBuf;

use thiserror::Error;

/// Process exit codes.
pub mod exit_code {
    pub const OK: i32 = 0;
    pub const OTHER: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const DATA: i32 = 3;
    pub const NUMERIC: i32 = 4;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] adaensemble::Error),
    #[error("config {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    pub fn exit_code(&self) -> i32 {
        use adaensemble::Error as E;
        match self {
            CliError::Config { .. } | CliError::Usage(_) => exit_code::CONFIG,
            CliError::Io { .. } => exit_code::DATA,
            CliError::Core(e) => match e {
                E::Config(_) | E::Plan(_) => exit_code::CONFIG,
                E::Schema(_) | E::Stats(_) | E::Parse { .. } | E::Input(_) | E::Lookup { .. } | E::Fit(_) | E::Checkpoint(_) | E::Io(_) | E::Json(_) => {
                    exit_code::DATA
                }
                E::NonFinite(_) | E::Domain { .. } | E::EmptySupport { .. } => exit_code::NUMERIC,
                _ => exit_code::OTHER,
            },
        }
    }
}
