//! Configuration, CSV sinks, trace audit and SVG plots behind the `shdempc`
//! binary.

use std::path::{Path, PathBuf};

pub mod audit;
pub mod config;
pub mod plot;
pub mod sinks;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but does not parse as the expected table.
    #[error("{}: {msg}", path.display())]
    Data { path: PathBuf, msg: String },

    #[error("run failed: {0}")]
    Run(shdempc::Error),

    #[error("audit failed: {0}")]
    Audit(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn data(path: &Path, msg: impl ToString) -> Self {
        CliError::Data {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        }
    }

    /// Process exit status for this error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } | CliError::Data { .. } => 3,
            CliError::Run(_) => 4,
            CliError::Audit(_) => 5,
        }
    }
}

impl From<shdempc::Error> for CliError {
    fn from(e: shdempc::Error) -> Self {
        match e {
            shdempc::Error::Config(msg) => CliError::Config(msg),
            other => CliError::Run(other),
        }
    }
}
