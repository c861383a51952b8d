//! Comparison detectors that reuse the fitted forest or the standardized
//! training inputs: adapted MSP and ODIN, input-space Mahalanobis, split
//! conformal prediction and input-space kNN distance.
//!
//! Each detector has a native score and an oriented score where larger means
//! more out-of-distribution; thresholds and evaluation use the oriented one.

use std::sync::Arc;

use nalgebra::DMatrix;
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{row_slice, split_indices, SplitSpec};
use crate::forest::{Forest, ForestParams};
use crate::outpro::{calibration_threshold, OodResult, OutProEngine};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Msp,
    Odin,
    MahalanobisInput,
    Conformal,
    KnnInput,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 5] = [
        BaselineKind::Msp,
        BaselineKind::Odin,
        BaselineKind::MahalanobisInput,
        BaselineKind::Conformal,
        BaselineKind::KnnInput,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Msp => "msp",
            BaselineKind::Odin => "odin",
            BaselineKind::MahalanobisInput => "mahalanobis_input",
            BaselineKind::Conformal => "conformal",
            BaselineKind::KnnInput => "knn_input",
        }
    }

    /// Whether the native score grows with atypicality.
    pub fn larger_is_ood(self) -> bool {
        !matches!(self, BaselineKind::Msp | BaselineKind::Odin)
    }
}

impl std::fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BaselineKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidParameter(format!("unknown baseline '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineParams {
    /// Neighbors for the kNN distance.
    pub k: usize,
    pub odin_epsilon: f64,
    /// Mahalanobis ridge relative to the mean variance.
    pub ridge: f64,
    /// Share of the training rows held out to calibrate conformal residuals.
    pub calib_fraction: f64,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for BaselineParams {
    fn default() -> Self {
        Self {
            k: 10,
            odin_epsilon: 0.01,
            ridge: 1e-6,
            calib_fraction: 0.25,
            alpha: 0.05,
            seed: 0,
        }
    }
}

/// `1 / (1 + |prediction − ȳ|)`; small values suggest OOD.
pub fn msp_score(prediction: f64, y_mean: f64) -> f64 {
    1.0 / (1.0 + (prediction - y_mean).abs())
}

/// `x + ε·sign(x)` with sign(0) = 0.
pub fn odin_perturb(x: &[f64], epsilon: f64) -> Vec<f64> {
    x.iter()
        .map(|&v| if v == 0.0 { v } else { v + epsilon * v.signum() })
        .collect()
}

/// Mean Euclidean distance from `x` to its `k` nearest rows of `train`,
/// skipping row `exclude`.
pub fn knn_distance(train: &Array2<f64>, x: &[f64], k: usize, exclude: Option<usize>) -> Result<f64> {
    let available = train.nrows() - usize::from(exclude.is_some_and(|e| e < train.nrows()));
    if k == 0 || k > available {
        return Err(Error::InvalidParameter(format!(
            "k = {k} neighbors requested from {available} training rows"
        )));
    }
    let mut d: Vec<f64> = (0..train.nrows())
        .filter(|&i| Some(i) != exclude)
        .map(|i| {
            row_slice(train, i)
                .iter()
                .zip(x)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    d.select_nth_unstable_by(k - 1, f64::total_cmp);
    let mut nearest = d[..k].to_vec();
    nearest.sort_by(f64::total_cmp);
    Ok(nearest.iter().sum::<f64>() / k as f64)
}

#[derive(Debug, Clone)]
struct MahalanobisState {
    mean: Vec<f64>,
    /// Row-major lower Cholesky factor of the ridged covariance.
    chol: Vec<f64>,
}

impl MahalanobisState {
    fn fit(x: &Array2<f64>, ridge: f64) -> Result<Self> {
        let (n, d) = x.dim();
        if d >= n {
            return Err(Error::Singular(format!(
                "input covariance of {d} features from {n} rows is singular; use a subspace metric or a larger ridge"
            )));
        }
        let mean: Vec<f64> = (0..d).map(|j| x.column(j).sum() / n as f64).collect();
        let mut cov = DMatrix::zeros(d, d);
        for row in x.rows() {
            for a in 0..d {
                let da = row[a] - mean[a];
                for b in 0..=a {
                    cov[(a, b)] += da * (row[b] - mean[b]);
                }
            }
        }
        for a in 0..d {
            for b in 0..=a {
                let v = cov[(a, b)] / (n - 1) as f64;
                cov[(a, b)] = v;
                cov[(b, a)] = v;
            }
        }
        let chol = crate::outpro::cholesky_factor(&cov, ridge)?;
        Ok(Self { mean, chol })
    }

    fn distance(&self, z: &[f64]) -> f64 {
        let d = self.mean.len();
        let mut y = vec![0.0; d];
        let mut q = 0.0;
        for i in 0..d {
            let mut v = z[i] - self.mean[i];
            for (k, yk) in y.iter().enumerate().take(i) {
                v -= self.chol[i * d + k] * yk;
            }
            y[i] = v / self.chol[i * d + i];
            q += y[i] * y[i];
        }
        q.sqrt()
    }
}

#[derive(Debug, Clone)]
struct ConformalState {
    forest: Forest,
    median: f64,
    quantile: f64,
}

/// A fitted baseline detector.
#[derive(Debug, Clone)]
pub struct BaselineModel {
    kind: BaselineKind,
    engine: Arc<OutProEngine>,
    params: BaselineParams,
    y_mean: f64,
    mahalanobis: Option<MahalanobisState>,
    conformal: Option<ConformalState>,
    train_scores: Vec<f64>,
    sorted_scores: Vec<f64>,
    threshold: f64,
}

impl BaselineModel {
    /// Fits `kind` on the engine's training data. MSP and ODIN training
    /// scores use out-of-bag predictions and kNN excludes the point itself,
    /// so the calibration null is not deflated by memorization.
    pub fn fit(kind: BaselineKind, engine: Arc<OutProEngine>, params: &BaselineParams) -> Result<Self> {
        let n = engine.n();
        let y = engine.response();
        let y_mean = y.iter().sum::<f64>() / n as f64;
        let mut model = Self {
            kind,
            engine: Arc::clone(&engine),
            params: *params,
            y_mean,
            mahalanobis: None,
            conformal: None,
            train_scores: Vec::new(),
            sorted_scores: Vec::new(),
            threshold: f64::NAN,
        };
        let train = engine.train();
        let forest = engine.forest();
        let scores: Vec<f64> = match kind {
            BaselineKind::Msp => forest
                .oob_predictions()
                .iter()
                .map(|&p| 1.0 - msp_score(p, y_mean))
                .collect(),
            BaselineKind::Odin => {
                let raw = engine.standardizer().inverse(train)?;
                (0..n)
                    .map(|i| {
                        let z = engine
                            .standardizer()
                            .transform_row(&odin_perturb(row_slice(&raw, i), params.odin_epsilon))?;
                        Ok(1.0 - msp_score(forest.predict_oob(i, &z)?, y_mean))
                    })
                    .collect::<Result<_>>()?
            }
            BaselineKind::MahalanobisInput => {
                let state = MahalanobisState::fit(train, params.ridge)?;
                let s = (0..n).map(|i| state.distance(row_slice(train, i))).collect();
                model.mahalanobis = Some(state);
                s
            }
            BaselineKind::KnnInput => (0..n)
                .into_par_iter()
                .map(|i| knn_distance(train, row_slice(train, i), params.k, Some(i)))
                .collect::<Result<_>>()?,
            BaselineKind::Conformal => {
                let state = fit_conformal(&engine, params)?;
                let s = (0..n)
                    .map(|i| {
                        state
                            .forest
                            .predict(row_slice(train, i))
                            .map(|p| (p - state.median).abs())
                    })
                    .collect::<Result<_>>()?;
                model.conformal = Some(state);
                s
            }
        };
        model.threshold = match &model.conformal {
            Some(c) => c.quantile,
            None => calibration_threshold(&scores, params.alpha)?,
        };
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        model.sorted_scores = sorted;
        model.train_scores = scores;
        Ok(model)
    }

    pub fn kind(&self) -> BaselineKind {
        self.kind
    }

    /// Oriented threshold; for conformal the residual quantile Q₁₋α.
    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn train_scores(&self) -> &[f64] {
        &self.train_scores
    }

    /// The detector's own score on a raw point (for MSP and ODIN smaller
    /// means more OOD).
    pub fn native_score(&self, x_raw: &[f64]) -> Result<f64> {
        let std = self.engine.standardizer();
        let forest = self.engine.forest();
        match self.kind {
            BaselineKind::Msp => Ok(msp_score(forest.predict(&std.transform_row(x_raw)?)?, self.y_mean)),
            BaselineKind::Odin => {
                let z = std.transform_row(&odin_perturb(x_raw, self.params.odin_epsilon))?;
                Ok(msp_score(forest.predict(&z)?, self.y_mean))
            }
            BaselineKind::MahalanobisInput => {
                let z = std.transform_row(x_raw)?;
                Ok(self.mahalanobis.as_ref().expect("fitted").distance(&z))
            }
            BaselineKind::KnnInput => {
                let z = std.transform_row(x_raw)?;
                knn_distance(self.engine.train(), &z, self.params.k, None)
            }
            BaselineKind::Conformal => {
                let c = self.conformal.as_ref().expect("fitted");
                Ok((c.forest.predict(&std.transform_row(x_raw)?)? - c.median).abs())
            }
        }
    }

    /// Larger means more OOD.
    pub fn score(&self, x_raw: &[f64]) -> Result<f64> {
        let s = self.native_score(x_raw)?;
        Ok(if self.kind.larger_is_ood() { s } else { 1.0 - s })
    }

    pub fn score_point(&self, x_raw: &[f64]) -> Result<OodResult> {
        let score = self.score(x_raw)?;
        let below = self.sorted_scores.partition_point(|&s| s <= score);
        Ok(OodResult {
            score,
            percentile: 100.0 * below as f64 / self.sorted_scores.len() as f64,
            flagged: score > self.threshold,
            neighborhood: Vec::new(),
        })
    }

    pub fn score_batch(&self, rows: &Array2<f64>) -> Result<Vec<OodResult>> {
        let rows = rows.as_standard_layout();
        (0..rows.nrows())
            .into_par_iter()
            .map(|i| self.score_point(rows.row(i).to_slice().expect("standard layout")))
            .collect()
    }
}

fn fit_conformal(engine: &OutProEngine, params: &BaselineParams) -> Result<ConformalState> {
    let n = engine.n();
    if !(params.calib_fraction > 0.0 && params.calib_fraction < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "calibration fraction must lie in (0, 1), got {}",
            params.calib_fraction
        )));
    }
    let (fit_idx, calib_idx) = split_indices(
        n,
        SplitSpec {
            train_fraction: 1.0 - params.calib_fraction,
            seed: params.seed,
        },
    )?;
    if calib_idx.is_empty() {
        return Err(Error::TooSmall("conformal calibration set is empty".into()));
    }
    let train = engine.train();
    let y = engine.response();
    let x_fit = train.select(ndarray::Axis(0), &fit_idx);
    let y_fit: Vec<f64> = fit_idx.iter().map(|&i| y[i]).collect();
    let forest_params = ForestParams {
        ntree: engine.forest().ntree(),
        mtry: Some(engine.forest().mtry()),
        min_node_size: engine.forest().min_node_size(),
        seed: params.seed ^ 0x5eed_c0f0,
    };
    let forest = Forest::fit(&x_fit, &y_fit, &forest_params)?;
    let preds: Vec<f64> = calib_idx
        .iter()
        .map(|&i| forest.predict_unchecked(row_slice(train, i)))
        .collect();
    let residuals: Vec<f64> = calib_idx.iter().zip(&preds).map(|(&i, p)| (y[i] - p).abs()).collect();
    let mut sorted = preds.clone();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    let median = if m % 2 == 1 {
        sorted[m / 2]
    } else {
        0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
    };
    let quantile = residual_quantile(&residuals, params.alpha)?;
    Ok(ConformalState {
        forest,
        median,
        quantile,
    })
}

/// ⌈(1−α)m⌉-th smallest absolute residual.
fn residual_quantile(residuals: &[f64], alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    let mut r = residuals.to_vec();
    r.sort_by(f64::total_cmp);
    let k = (((1.0 - alpha) * r.len() as f64) - 1e-9)
        .ceil()
        .clamp(1.0, r.len() as f64) as usize;
    Ok(r[k - 1])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn msp_values() {
        assert_eq!(msp_score(3.0, 3.0), 1.0);
        assert_eq!(msp_score(4.0, 3.0), 0.5);
        assert_eq!(msp_score(2.0, 3.0), 0.5);
        assert!(msp_score(1e300, 0.0) > 0.0);
    }

    #[test]
    fn odin_leaves_zero_alone() {
        assert_eq!(odin_perturb(&[0.0, 0.0], 0.01), vec![0.0, 0.0]);
        assert_eq!(odin_perturb(&[2.0, -1.0, 0.0], 0.5), vec![2.5, -1.5, 0.0]);
    }

    #[test]
    fn knn_examples() {
        let train = Array2::from_shape_vec((4, 2), vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 5.0, 5.0]).unwrap();
        assert_eq!(knn_distance(&train, &[1.0, 1.0], 3, None).unwrap(), 0.0);
        let train = Array2::from_shape_vec((2, 1), vec![2.0, 10.0]).unwrap();
        assert_eq!(knn_distance(&train, &[0.0], 1, None).unwrap(), 2.0);
        assert!(knn_distance(&train, &[0.0], 0, None).is_err());
        assert!(knn_distance(&train, &[0.0], 2, Some(0)).is_err());
    }

    #[test]
    fn mahalanobis_reduces_to_euclidean_for_identity_covariance() {
        let state = MahalanobisState {
            mean: vec![0.0, 0.0],
            chol: vec![1.0, 0.0, 0.0, 1.0],
        };
        assert_eq!(state.distance(&[0.0, 0.0]), 0.0);
        assert_eq!(state.distance(&[0.0, 1.0]), 1.0);
        let wide = Array2::zeros((3, 5));
        assert!(matches!(MahalanobisState::fit(&wide, 1e-6), Err(Error::Singular(_))));
    }

    #[test]
    fn residual_quantile_shrinks_as_alpha_grows() {
        let r: Vec<f64> = (0..100).map(|v| v as f64).collect();
        assert_eq!(residual_quantile(&r, 0.05).unwrap(), 94.0);
        let mut last = f64::INFINITY;
        for a in [0.01, 0.05, 0.1, 0.3] {
            let q = residual_quantile(&r, a).unwrap();
            assert!(q <= last);
            last = q;
        }
    }
}
