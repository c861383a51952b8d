//! The run configuration: one TOML file for every command.

use std::path::{Path, PathBuf};

use outpro::anomgen::AnomalyMode;
use outpro::eval::{CopulaBench, FriedmanBench};
use outpro::outpro::OodParams;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Name of the response column in input CSVs.
    pub response: String,
    /// Worker threads; unset means the rayon default.
    pub jobs: Option<usize>,
    pub ood: OodParams,
    pub anomaly: AnomalyConfig,
    pub bench_friedman: FriedmanBench,
    pub bench_dataset: CopulaBench,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            response: "y".into(),
            jobs: None,
            ood: OodParams::default(),
            anomaly: AnomalyConfig::default(),
            bench_friedman: FriedmanBench::default(),
            bench_dataset: CopulaBench::default(),
            paths: Paths::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnomalyConfig {
    pub mode: AnomalyMode,
    /// Warp exponent.
    pub gamma: f64,
    /// Tail mass for joint and support.
    pub q: f64,
    /// Shift size in standard deviations.
    pub magnitude: f64,
    pub count: usize,
    /// Feature names to shift; empty means the top `top_fraction` by
    /// permutation importance.
    pub targets: Vec<String>,
    pub top_fraction: f64,
    pub seed: u64,
}

impl Default for AnomalyConfig {
    fn default() -> Self {
        Self {
            mode: AnomalyMode::Warp,
            gamma: 4.0,
            q: 0.05,
            magnitude: 0.5,
            count: 100,
            targets: Vec::new(),
            top_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub bundle: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        toml::from_str(&text).map_err(|source| CliError::Config {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load_or_default(path: Option<&Path>) -> CliResult<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn partial_files_fill_in_defaults() {
        let cfg: RunConfig = toml::from_str(
            r#"
            response = "target"
            [ood]
            k = 20
            [ood.metric]
            kind = "manhattan"
            [anomaly]
            mode = "support"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.response, "target");
        assert_eq!(cfg.ood.k, 20);
        assert_eq!(cfg.ood.metric.kind, outpro::outpro::MetricKind::Manhattan);
        assert_eq!(cfg.ood.alpha, 0.05);
        assert_eq!(cfg.anomaly.mode, AnomalyMode::Support);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("respnse = \"y\"").is_err());
        assert!(toml::from_str::<RunConfig>("[ood]\nkk = 3").is_err());
        assert!(toml::from_str::<RunConfig>("[ood.forest]\nntrees = 3").is_err());
    }
}
