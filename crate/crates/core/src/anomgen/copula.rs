//! Gaussian copula fitted to empirical marginals, and the warp, joint and
//! support anomaly modes built on it.

use nalgebra::DMatrix;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::chi2::chi2_upper_quantile;
use super::{AnomalyBatch, AnomalyMode, BatchParams};
use crate::data::Dataset;
use crate::outpro::calibration_threshold;
use crate::{Error, Result};

fn std_normal() -> Normal {
    Normal::standard()
}

/// Standard normal CDF.
pub fn phi(z: f64) -> f64 {
    std_normal().cdf(z)
}

/// Standard normal quantile; `u` is clamped into the open unit interval.
pub fn phi_inv(u: f64) -> f64 {
    std_normal().inverse_cdf(u.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0))
}

/// The warp map `u^γ / (u^γ + (1−u)^γ)`.
pub fn warp(u: f64, gamma: f64) -> f64 {
    if u <= 0.0 {
        return 0.0;
    }
    if u >= 1.0 {
        return 1.0;
    }
    1.0 / (1.0 + (gamma * ((1.0 - u).ln() - u.ln())).exp())
}

/// Empirical marginal of one column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Marginal {
    sorted: Vec<f64>,
    /// Slopes of value against normal score, used beyond the observed range.
    low_slope: f64,
    high_slope: f64,
}

impl Marginal {
    pub fn fit(values: &[f64]) -> Result<Self> {
        let n = values.len();
        if n < 2 {
            return Err(Error::TooSmall("a marginal needs at least two values".into()));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let k = ((0.05 * n as f64).ceil() as usize).clamp(2, n);
        let score = |i: usize| phi_inv((i + 1) as f64 / (n + 1) as f64);
        let overall = {
            let dz = score(n - 1) - score(0);
            (sorted[n - 1] - sorted[0]) / dz
        };
        let fit_slope = |idx: Vec<usize>| {
            let zs: Vec<f64> = idx.iter().map(|&i| score(i)).collect();
            let xs: Vec<f64> = idx.iter().map(|&i| sorted[i]).collect();
            let zm = zs.iter().sum::<f64>() / zs.len() as f64;
            let xm = xs.iter().sum::<f64>() / xs.len() as f64;
            let sxy: f64 = zs.iter().zip(&xs).map(|(z, x)| (z - zm) * (x - xm)).sum();
            let sxx: f64 = zs.iter().map(|z| (z - zm) * (z - zm)).sum();
            let s = sxy / sxx;
            if s > 0.0 && s.is_finite() {
                s
            } else {
                overall
            }
        };
        let low_slope = fit_slope((0..k).collect());
        let high_slope = fit_slope((n - k..n).collect());
        Ok(Self {
            sorted,
            low_slope,
            high_slope,
        })
    }

    pub fn n(&self) -> usize {
        self.sorted.len()
    }

    pub fn min(&self) -> f64 {
        self.sorted[0]
    }

    pub fn max(&self) -> f64 {
        self.sorted[self.n() - 1]
    }

    /// Midrank/(n+1); tied observations share the average of their ranks.
    pub fn cdf(&self, v: f64) -> f64 {
        let less = self.sorted.partition_point(|&s| s < v);
        let upto = self.sorted.partition_point(|&s| s <= v);
        let eq = upto - less;
        (less as f64 + (eq as f64 + 1.0) / 2.0) / (self.n() + 1) as f64
    }

    /// Linear interpolation of the knots (i/(n+1), x₍ᵢ₎), held flat outside them.
    pub fn quantile(&self, u: f64) -> f64 {
        let n = self.n();
        let t = u * (n + 1) as f64;
        let snapped = t.round();
        let t = if (t - snapped).abs() < 1e-9 { snapped } else { t };
        if t <= 1.0 {
            return self.sorted[0];
        }
        if t >= n as f64 {
            return self.sorted[n - 1];
        }
        let i = t.floor() as usize;
        let frac = t - i as f64;
        let (a, b) = (self.sorted[i - 1], self.sorted[i]);
        if frac == 0.0 {
            a
        } else {
            a + frac * (b - a)
        }
    }

    /// Inverse CDF that continues past the observed range, linear in the
    /// normal score with the slope fitted to the outer knots.
    pub fn quantile_extrapolating(&self, u: f64) -> f64 {
        self.quantile_at_score(u, phi_inv(u))
    }

    /// Same as [`Marginal::quantile_extrapolating`] given both `u` and its
    /// normal score, so extreme latents keep their precision.
    pub fn quantile_at_score(&self, u: f64, z: f64) -> f64 {
        let n = self.n();
        let lo_u = 1.0 / (n + 1) as f64;
        let hi_u = n as f64 / (n + 1) as f64;
        if u < lo_u {
            self.min() + self.low_slope * (z - phi_inv(lo_u))
        } else if u > hi_u {
            self.max() + self.high_slope * (z - phi_inv(hi_u))
        } else {
            self.quantile(u)
        }
    }
}

/// Gaussian copula with empirical marginals.
#[derive(Debug, Clone)]
pub struct CopulaModel {
    marginals: Vec<Marginal>,
    corr: DMatrix<f64>,
    /// Lower Cholesky factor of `corr`.
    chol: DMatrix<f64>,
    latents: Array2<f64>,
    train_distances: Vec<f64>,
    tau: f64,
    q: f64,
    jitter: f64,
}

impl CopulaModel {
    pub fn fit(train: &Dataset, q: f64) -> Result<Self> {
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::InvalidParameter(format!("q must lie in (0, 1), got {q}")));
        }
        let x = train.features();
        let (n, d) = x.dim();
        if n < d + 2 {
            log::warn!("copula fit with n = {n} rows for d = {d} columns; the correlation estimate is unstable");
        }
        let marginals = (0..d)
            .map(|j| Marginal::fit(&x.column(j).to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let latents = Array2::from_shape_fn((n, d), |(i, j)| phi_inv(marginals[j].cdf(x[[i, j]])));

        let mut corr = DMatrix::zeros(d, d);
        let means: Vec<f64> = (0..d).map(|j| latents.column(j).sum() / n as f64).collect();
        for a in 0..d {
            for b in 0..=a {
                let s: f64 = (0..n)
                    .map(|i| (latents[[i, a]] - means[a]) * (latents[[i, b]] - means[b]))
                    .sum();
                corr[(a, b)] = s;
                corr[(b, a)] = s;
            }
        }
        let sd: Vec<f64> = (0..d).map(|j| corr[(j, j)].sqrt()).collect();
        for a in 0..d {
            for b in 0..d {
                corr[(a, b)] = if a == b {
                    1.0
                } else if sd[a] > 0.0 && sd[b] > 0.0 {
                    corr[(a, b)] / (sd[a] * sd[b])
                } else {
                    0.0
                };
            }
        }
        let (corr, chol, jitter) = regularize(corr)?;
        let mut model = Self {
            marginals,
            corr,
            chol,
            latents,
            train_distances: Vec::new(),
            tau: 0.0,
            q,
            jitter,
        };
        model.train_distances = (0..n)
            .map(|i| model.mahalanobis(&model.latents.row(i).to_vec()))
            .collect();
        model.tau = calibration_threshold(&model.train_distances, q)?;
        Ok(model)
    }

    pub fn d(&self) -> usize {
        self.marginals.len()
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    /// Latent Mahalanobis cutoff: the ⌈(1−q)n⌉-th smallest training distance.
    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn correlation(&self) -> &DMatrix<f64> {
        &self.corr
    }

    /// Ridge added to the correlation before factoring (0 when none was needed).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn marginal(&self, j: usize) -> &Marginal {
        &self.marginals[j]
    }

    /// Normal scores of the training rows.
    pub fn latents(&self) -> &Array2<f64> {
        &self.latents
    }

    pub fn train_distances(&self) -> &[f64] {
        &self.train_distances
    }

    pub fn inverse_cdf_extrapolating(&self, j: usize, u: f64) -> f64 {
        self.marginals[j].quantile_extrapolating(u)
    }

    /// √(zᵀR⁻¹z).
    pub fn mahalanobis(&self, z: &[f64]) -> f64 {
        let d = self.d();
        let mut y = vec![0.0; d];
        let mut q = 0.0;
        for i in 0..d {
            let mut v = z[i];
            for (k, yk) in y.iter().enumerate().take(i) {
                v -= self.chol[(i, k)] * yk;
            }
            y[i] = v / self.chol[(i, i)];
            q += y[i] * y[i];
        }
        q.sqrt()
    }

    fn sample_latent<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let d = self.d();
        let e: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        (0..d)
            .map(|i| (0..=i).map(|k| self.chol[(i, k)] * e[k]).sum())
            .collect()
    }

    /// Squared radius from the χ²_d tail with mass `q`, drawn uniformly over
    /// tail probabilities.
    fn tail_radius<R: Rng>(&self, q: f64, rng: &mut R) -> Result<f64> {
        let r: f64 = rng.random();
        chi2_upper_quantile(q * (1.0 - r), self.d()).map(f64::sqrt)
    }

    fn base_latent<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let i = rng.random_range(0..self.latents.nrows());
        self.latents.row(i).to_vec()
    }

    /// Tail-inflated marginals with the dependence left alone. Labeled by
    /// whether the warped latent exceeds the Mahalanobis cutoff.
    pub fn gen_warp(&self, m: usize, gamma: f64, seed: u64) -> Result<AnomalyBatch> {
        if !(gamma > 1.0 && gamma.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "warp exponent must exceed 1, got {gamma}"
            )));
        }
        let d = self.d();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut points = Array2::zeros((m, d));
        let mut latents = Array2::zeros((m, d));
        let mut labels = Vec::with_capacity(m);
        for r in 0..m {
            let z = self.sample_latent(&mut rng);
            let mut zs = vec![0.0; d];
            for j in 0..d {
                let u = warp(phi(z[j]), gamma).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
                zs[j] = phi_inv(u);
                latents[[r, j]] = zs[j];
                points[[r, j]] = self.marginals[j].quantile(u);
            }
            labels.push(self.mahalanobis(&zs) > self.tau);
        }
        Ok(AnomalyBatch {
            points,
            latents: Some(latents),
            labels,
            mode: AnomalyMode::Warp,
            params: BatchParams {
                gamma: Some(gamma),
                q: Some(self.q),
                seed,
                ..BatchParams::default()
            },
        })
    }

    /// Training latent pushed along a random direction by a χ² tail radius;
    /// marginals stay within the observed ranges.
    pub fn gen_joint(&self, m: usize, q: f64, seed: u64) -> Result<AnomalyBatch> {
        check_q(q)?;
        let d = self.d();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut points = Array2::zeros((m, d));
        let mut latents = Array2::zeros((m, d));
        for r in 0..m {
            let zb = self.base_latent(&mut rng);
            let dir = unit_vector(d, &mut rng);
            let radius = self.tail_radius(q, &mut rng)?;
            for j in 0..d {
                let z = zb[j] + radius * dir[j];
                latents[[r, j]] = z;
                points[[r, j]] = self.marginals[j].quantile(phi(z));
            }
        }
        Ok(AnomalyBatch {
            points,
            latents: Some(latents),
            labels: vec![true; m],
            mode: AnomalyMode::Joint,
            params: BatchParams {
                q: Some(q),
                seed,
                ..BatchParams::default()
            },
        })
    }

    /// Training latent rescaled to a χ² tail radius and mapped through the
    /// extrapolating marginals.
    pub fn gen_support(&self, m: usize, q: f64, seed: u64) -> Result<AnomalyBatch> {
        check_q(q)?;
        let d = self.d();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut points = Array2::zeros((m, d));
        let mut latents = Array2::zeros((m, d));
        for r in 0..m {
            let (zb, rb) = loop {
                let zb = self.base_latent(&mut rng);
                let rb = self.mahalanobis(&zb);
                if rb > 0.0 {
                    break (zb, rb);
                }
            };
            let scale = self.tail_radius(q, &mut rng)? / rb;
            for j in 0..d {
                let z = zb[j] * scale;
                latents[[r, j]] = z;
                points[[r, j]] = self.marginals[j].quantile_at_score(phi(z), z);
            }
        }
        Ok(AnomalyBatch {
            points,
            latents: Some(latents),
            labels: vec![true; m],
            mode: AnomalyMode::Support,
            params: BatchParams {
                q: Some(q),
                seed,
                ..BatchParams::default()
            },
        })
    }
}

fn check_q(q: f64) -> Result<()> {
    if q > 0.0 && q < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("q must lie in (0, 1), got {q}")))
    }
}

fn unit_vector<R: Rng>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Cholesky of the correlation matrix, adding 1e-8·I and doubling up to ten
/// times when it is not numerically positive definite. A jittered matrix is
/// rescaled back to unit diagonal.
fn regularize(corr: DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>, f64)> {
    let d = corr.nrows();
    let factor = |m: &DMatrix<f64>| {
        m.clone()
            .cholesky()
            .map(|c| c.l())
            .filter(|l| (0..d).all(|i| l[(i, i)] > 1e-7))
    };
    if let Some(l) = factor(&corr) {
        return Ok((corr, l, 0.0));
    }
    let mut lambda = 1e-8;
    for _ in 0..10 {
        let mut m = corr.clone();
        for i in 0..d {
            m[(i, i)] += lambda;
        }
        m /= 1.0 + lambda;
        if let Some(l) = factor(&m) {
            log::warn!("latent correlation was not positive definite; added a ridge of {lambda:e}");
            return Ok((m, l, lambda));
        }
        lambda *= 2.0;
    }
    Err(Error::Singular(
        "latent correlation is not positive definite after the maximum jitter".into(),
    ))
}
