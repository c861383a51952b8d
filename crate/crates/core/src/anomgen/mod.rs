//! Anomaly generators with ground-truth labels.

mod chi2;
mod copula;
mod friedman;

use std::fs::File;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use chi2::{chi2_cdf, chi2_quantile, chi2_sf, chi2_upper_quantile, ln_gamma};
pub use copula::{phi, phi_inv, warp, CopulaModel, Marginal};
pub use friedman::{friedman_mean, gen_friedman, gen_shift_anomalies, FriedmanSpec};

use crate::data::Dataset;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnomalyMode {
    Warp,
    Joint,
    Support,
    Shift,
}

impl AnomalyMode {
    pub fn name(self) -> &'static str {
        match self {
            AnomalyMode::Warp => "warp",
            AnomalyMode::Joint => "joint",
            AnomalyMode::Support => "support",
            AnomalyMode::Shift => "shift",
        }
    }
}

impl std::fmt::Display for AnomalyMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AnomalyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            AnomalyMode::Warp,
            AnomalyMode::Joint,
            AnomalyMode::Support,
            AnomalyMode::Shift,
        ]
        .into_iter()
        .find(|m| m.name().eq_ignore_ascii_case(s))
        .ok_or_else(|| Error::InvalidParameter(format!("unknown anomaly mode '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BatchParams {
    pub gamma: Option<f64>,
    pub q: Option<f64>,
    pub magnitude: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyBatch {
    /// Raw-scale points, one per row.
    pub points: Array2<f64>,
    /// Copula latents behind each point (copula modes only).
    pub latents: Option<Array2<f64>>,
    pub labels: Vec<bool>,
    pub mode: AnomalyMode,
    pub params: BatchParams,
}

impl AnomalyBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_anomalous(&self) -> usize {
        self.labels.iter().filter(|l| **l).count()
    }

    /// The points as a dataset carrying the given response.
    pub fn to_dataset(&self, response: &[f64]) -> Result<Dataset> {
        Dataset::from_rows(self.points.clone(), response.to_vec())
    }

    /// Feature columns followed by `mode`, `label` (0/1) and `seed`.
    pub fn write_csv(&self, feature_names: &[String], path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if feature_names.len() != self.points.ncols() {
            return Err(Error::DimensionMismatch {
                expected: self.points.ncols(),
                found: feature_names.len(),
            });
        }
        let file = File::create(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut w = csv::Writer::from_writer(file);
        let mut header: Vec<&str> = feature_names.iter().map(String::as_str).collect();
        header.extend(["mode", "label", "seed"]);
        w.write_record(&header)?;
        let seed = self.params.seed.to_string();
        for (row, label) in self.points.rows().into_iter().zip(&self.labels) {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            rec.push(self.mode.name().to_string());
            rec.push(u8::from(*label).to_string());
            rec.push(seed.clone());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}
