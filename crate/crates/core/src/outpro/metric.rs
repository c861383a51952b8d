//! Importance-weighted distances restricted to the signal features.

use nalgebra::DMatrix;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::varprio::ImportancePlan;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Product,
    Optics,
    Euclidean,
    Manhattan,
    Mahalanobis,
    Minkowski,
}

impl MetricKind {
    pub const ALL: [MetricKind; 6] = [
        MetricKind::Product,
        MetricKind::Optics,
        MetricKind::Euclidean,
        MetricKind::Manhattan,
        MetricKind::Mahalanobis,
        MetricKind::Minkowski,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Product => "product",
            MetricKind::Optics => "optics",
            MetricKind::Euclidean => "euclidean",
            MetricKind::Manhattan => "manhattan",
            MetricKind::Mahalanobis => "mahalanobis",
            MetricKind::Minkowski => "minkowski",
        }
    }
}

impl std::fmt::Display for MetricKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MetricKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidParameter(format!("unknown metric '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricSpec {
    pub kind: MetricKind,
    /// Added to each absolute difference before the product is taken.
    pub epsilon: f64,
    /// Minkowski order.
    pub p: f64,
    /// OPTICS neighborhood size, the point itself included.
    pub min_pts: usize,
    /// Mahalanobis ridge, relative to the mean variance of the signal features.
    pub ridge: f64,
}

impl Default for MetricSpec {
    fn default() -> Self {
        Self {
            kind: MetricKind::Product,
            epsilon: 1e-6,
            p: 4.0,
            min_pts: 5,
            ridge: 1e-6,
        }
    }
}

impl MetricSpec {
    pub fn of(kind: MetricKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        match self.kind {
            MetricKind::Product if !(self.epsilon > 0.0 && self.epsilon.is_finite()) => {
                bad(format!("product metric needs epsilon > 0, got {}", self.epsilon))
            }
            MetricKind::Minkowski if !(self.p >= 1.0 && self.p.is_finite()) => {
                bad(format!("minkowski order must be ≥ 1, got {}", self.p))
            }
            MetricKind::Optics if self.min_pts < 2 => bad(format!("min_pts must be ≥ 2, got {}", self.min_pts)),
            MetricKind::Mahalanobis if !(self.ridge >= 0.0 && self.ridge.is_finite()) => {
                bad(format!("ridge must be ≥ 0, got {}", self.ridge))
            }
            _ => Ok(()),
        }
    }
}

/// A metric bound to a signal set: weights, and for Mahalanobis the Cholesky
/// factor of the regularized signal-feature covariance.
#[derive(Debug, Clone)]
pub struct SubspaceMetric {
    spec: MetricSpec,
    signal: Vec<usize>,
    weights: Vec<f64>,
    sqrt_weights: Vec<f64>,
    sigma: Option<DMatrix<f64>>,
    /// Row-major lower-triangular factor.
    chol: Option<Vec<f64>>,
}

impl SubspaceMetric {
    /// `train` is the standardized training matrix; it is only read for the
    /// Mahalanobis covariance.
    pub fn new(spec: MetricSpec, plan: &ImportancePlan, train: &Array2<f64>) -> Result<Self> {
        spec.validate()?;
        if plan.signal.is_empty() {
            return Err(Error::InvalidParameter("empty signal set".into()));
        }
        let (sigma, chol) = if spec.kind == MetricKind::Mahalanobis {
            let sigma = signal_covariance(train, &plan.signal)?;
            let chol = cholesky(&sigma, spec.ridge)?;
            (Some(sigma), Some(chol))
        } else {
            (None, None)
        };
        Ok(Self {
            spec,
            signal: plan.signal.clone(),
            weights: plan.weights.clone(),
            sqrt_weights: plan.weights.iter().map(|w| w.sqrt()).collect(),
            sigma,
            chol,
        })
    }

    pub fn spec(&self) -> &MetricSpec {
        &self.spec
    }

    pub fn kind(&self) -> MetricKind {
        self.spec.kind
    }

    pub fn signal(&self) -> &[usize] {
        &self.signal
    }

    /// Sample covariance of the standardized training data on the signal
    /// features, before the ridge. Only present for Mahalanobis.
    pub fn sigma(&self) -> Option<&DMatrix<f64>> {
        self.sigma.as_ref()
    }

    /// Signal coordinates of `x` scaled by √w, the space OPTICS works in.
    pub fn scaled(&self, x: &[f64]) -> Vec<f64> {
        self.signal
            .iter()
            .zip(&self.sqrt_weights)
            .map(|(&s, r)| x[s] * r)
            .collect()
    }

    /// Distance between two standardized points of full dimension.
    pub fn distance(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let w = &self.weights;
        let diffs = self.signal.iter().map(|&s| x[s] - y[s]);
        Ok(match self.spec.kind {
            MetricKind::Product => {
                let eps = self.spec.epsilon;
                diffs.zip(w).map(|(dv, w)| w * (dv.abs() + eps).ln()).sum::<f64>().exp()
            }
            MetricKind::Euclidean => diffs.zip(w).map(|(dv, w)| w * dv * dv).sum::<f64>().sqrt(),
            MetricKind::Manhattan => diffs.zip(w).map(|(dv, w)| w * dv.abs()).sum(),
            MetricKind::Minkowski => {
                let p = self.spec.p;
                diffs
                    .zip(w)
                    .map(|(dv, w)| w * dv.abs().powf(p))
                    .sum::<f64>()
                    .powf(p.recip())
            }
            MetricKind::Mahalanobis => {
                let l = self.chol.as_ref().expect("factor built for mahalanobis");
                let m = self.signal.len();
                let delta: Vec<f64> = diffs.collect();
                // Solve L z = Δ; the squared distance is |z|².
                let mut z = vec![0.0; m];
                let mut q = 0.0;
                for i in 0..m {
                    let mut v = delta[i];
                    for k in 0..i {
                        v -= l[i * m + k] * z[k];
                    }
                    z[i] = v / l[i * m + i];
                    q += z[i] * z[i];
                }
                q.sqrt()
            }
            MetricKind::Optics => {
                return Err(Error::InvalidParameter(
                    "optics scores a whole neighborhood, not a pair of points".into(),
                ))
            }
        })
    }
}

fn signal_covariance(train: &Array2<f64>, signal: &[usize]) -> Result<DMatrix<f64>> {
    let n = train.nrows();
    if n < 2 {
        return Err(Error::TooSmall("covariance needs at least two rows".into()));
    }
    let m = signal.len();
    let means: Vec<f64> = signal.iter().map(|&s| train.column(s).sum() / n as f64).collect();
    let mut cov = DMatrix::zeros(m, m);
    for row in train.rows() {
        for a in 0..m {
            let da = row[signal[a]] - means[a];
            for b in 0..=a {
                cov[(a, b)] += da * (row[signal[b]] - means[b]);
            }
        }
    }
    for a in 0..m {
        for b in 0..=a {
            let v = cov[(a, b)] / (n - 1) as f64;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    Ok(cov)
}

/// Cholesky factor of `sigma + λI` with `λ = ridge · trace/m`.
pub(crate) fn cholesky(sigma: &DMatrix<f64>, ridge: f64) -> Result<Vec<f64>> {
    let m = sigma.nrows();
    let lambda = ridge * sigma.trace() / m as f64;
    let mut a = sigma.clone();
    for i in 0..m {
        a[(i, i)] += lambda;
    }
    let chol = a.cholesky().ok_or_else(|| {
        Error::Singular(format!(
            "covariance is not positive definite after a ridge of {lambda:e}; increase the ridge"
        ))
    })?;
    let l = chol.l();
    let mut out = vec![0.0; m * m];
    for i in 0..m {
        for k in 0..=i {
            out[i * m + k] = l[(i, k)];
        }
        if !(l[(i, i)] > 0.0 && l[(i, i)].is_finite()) {
            return Err(Error::Singular("degenerate Cholesky pivot; increase the ridge".into()));
        }
    }
    Ok(out)
}
