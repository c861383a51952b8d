//! Friedman regression simulator and shift anomalies labeled by leaving the
//! unit hypercube.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{AnomalyBatch, AnomalyMode, BatchParams};
use crate::data::{column_sd, Dataset};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FriedmanSpec {
    pub n: usize,
    pub d: usize,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for FriedmanSpec {
    fn default() -> Self {
        Self {
            n: 2000,
            d: 10,
            sigma: 1.0,
            seed: 0,
        }
    }
}

/// Noise-free response `10 sin(π x₁x₂) + 20 (x₃ − ½)² + 10 x₄ + 5 x₅`.
pub fn friedman_mean(x: &[f64]) -> f64 {
    10.0 * (std::f64::consts::PI * x[0] * x[1]).sin() + 20.0 * (x[2] - 0.5).powi(2) + 10.0 * x[3] + 5.0 * x[4]
}

/// Uniform covariates on `[0,1]^d` with Gaussian response noise.
pub fn gen_friedman(spec: &FriedmanSpec) -> Result<Dataset> {
    if spec.d < 5 {
        return Err(Error::InvalidParameter(format!(
            "the Friedman response uses five covariates, d = {} is too small",
            spec.d
        )));
    }
    if !(spec.sigma >= 0.0 && spec.sigma.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "sigma must be ≥ 0, got {}",
            spec.sigma
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let x = Array2::from_shape_fn((spec.n, spec.d), |_| rng.random::<f64>());
    let noise = Normal::new(0.0, spec.sigma).expect("validated sigma");
    let y = (0..spec.n)
        .map(|i| friedman_mean(x.row(i).as_slice().expect("standard layout")) + noise.sample(&mut rng))
        .collect();
    Dataset::from_rows(x, y)
}

/// Moves each targeted coordinate by `±magnitude · sd_j` (sd of the column in
/// `data`), with an independent fair sign per point and feature. A point is
/// anomalous when any coordinate leaves `[0, 1]`.
pub fn gen_shift_anomalies(data: &Dataset, targets: &[usize], magnitude: f64, seed: u64) -> Result<AnomalyBatch> {
    if targets.is_empty() {
        return Err(Error::InvalidParameter("no features to shift".into()));
    }
    if let Some(&j) = targets.iter().find(|&&j| j >= data.d()) {
        return Err(Error::InvalidParameter(format!("feature {j} out of range")));
    }
    if !(magnitude >= 0.0 && magnitude.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "shift magnitude must be ≥ 0, got {magnitude}"
        )));
    }
    let x = data.features();
    if x.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidParameter(
            "shift anomalies are labeled by leaving [0,1]; the input has values outside it".into(),
        ));
    }
    let deltas: Vec<(usize, f64)> = targets
        .iter()
        .map(|&j| (j, magnitude * column_sd(x.column(j))))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = x.clone();
    for mut row in points.rows_mut() {
        for &(j, delta) in &deltas {
            if rng.random::<bool>() {
                row[j] += delta;
            } else {
                row[j] -= delta;
            }
        }
    }
    let labels = points
        .rows()
        .into_iter()
        .map(|r| r.iter().any(|v| !(0.0..=1.0).contains(v)))
        .collect();
    Ok(AnomalyBatch {
        points,
        latents: None,
        labels,
        mode: AnomalyMode::Shift,
        params: BatchParams {
            magnitude: Some(magnitude),
            seed,
            ..BatchParams::default()
        },
    })
}
