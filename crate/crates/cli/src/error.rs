use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot parse config {path}: {source}")]
    Config {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },

    #[error("bad model bundle {path}: {source}")]
    Bundle {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("bundle {path} has format version {found}, this build reads version {expected}")]
    Version { path: PathBuf, found: u64, expected: u64 },

    #[error("json output: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Core(#[from] outpro::Error),
}

impl CliError {
    /// 2 for usage and I/O problems, 1 for failures inside the computation.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) => match e {
                outpro::Error::Io { .. }
                | outpro::Error::Csv(_)
                | outpro::Error::MissingColumn(_)
                | outpro::Error::BadCell { .. } => 2,
                _ => 1,
            },
            CliError::Json(_) => 1,
            _ => 2,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
