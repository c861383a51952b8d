//! Versioned model bundle: the fitted detector plus the config that made it.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use outpro::outpro::{ModelParts, OodModel};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const FORMAT_VERSION: u64 = 1;
const LARGE_BUNDLE_BYTES: u64 = 100 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub format_version: u64,
    /// Seconds since the Unix epoch.
    pub created: u64,
    pub feature_names: Vec<String>,
    pub response_name: String,
    pub config: RunConfig,
    /// Standardizer, forest, plan, standardized training matrix, training
    /// scores and threshold.
    pub model: ModelParts,
}

impl ModelBundle {
    pub fn new(model: &OodModel, feature_names: Vec<String>, response_name: String, config: RunConfig) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            created: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            feature_names,
            response_name,
            config,
            model: model.to_parts(),
        }
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        let io = |source| CliError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        serde_json::to_writer(&mut w, self).map_err(|source| CliError::Bundle {
            path: path.to_path_buf(),
            source,
        })?;
        w.flush().map_err(io)?;
        let size = std::fs::metadata(path).map_err(io)?.len();
        if size > LARGE_BUNDLE_BYTES {
            log::warn!(
                "bundle {} is {:.0} MB; it embeds the standardized training matrix and every tree",
                path.display(),
                size as f64 / 1048576.0
            );
        }
        Ok(())
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let file = File::open(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let bad = |source| CliError::Bundle {
            path: path.to_path_buf(),
            source,
        };
        let value: serde_json::Value = serde_json::from_reader(BufReader::new(file)).map_err(bad)?;
        let found = value
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .unwrap_or(0);
        if found != FORMAT_VERSION {
            return Err(CliError::Version {
                path: path.to_path_buf(),
                found,
                expected: FORMAT_VERSION,
            });
        }
        serde_json::from_value(value).map_err(bad)
    }

    pub fn to_model(&self) -> CliResult<OodModel> {
        Ok(OodModel::from_parts(self.model.clone())?)
    }
}
