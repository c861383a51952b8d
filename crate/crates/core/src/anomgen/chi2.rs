//! Chi-squared CDF and quantiles through the regularized incomplete gamma
//! function.

use crate::{Error, Result};

const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// ln Γ(x) for x > 0 (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // Reflection keeps the approximation in its accurate range.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS[0];
    let t = x + 7.5;
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized lower and upper incomplete gamma, (P(a,x), Q(a,x)).
fn gamma_pq(a: f64, x: f64) -> (f64, f64) {
    if x <= 0.0 {
        return (0.0, 1.0);
    }
    let log_prefix = a * x.ln() - x - ln_gamma(a);
    if x < a + 1.0 {
        // Series for P.
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..10_000 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-17 {
                break;
            }
        }
        let p = (sum.ln() + log_prefix).exp().min(1.0);
        (p, 1.0 - p)
    } else {
        // Continued fraction for Q, modified Lentz.
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..10_000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        let q = (h.ln() + log_prefix).exp().min(1.0);
        (1.0 - q, q)
    }
}

pub fn chi2_cdf(x: f64, dof: f64) -> f64 {
    gamma_pq(0.5 * dof, 0.5 * x).0
}

/// Upper tail probability P(X > x).
pub fn chi2_sf(x: f64, dof: f64) -> f64 {
    gamma_pq(0.5 * dof, 0.5 * x).1
}

fn chi2_ln_pdf(x: f64, dof: f64) -> f64 {
    let k = 0.5 * dof;
    (k - 1.0) * x.ln() - 0.5 * x - k * std::f64::consts::LN_2 - ln_gamma(k)
}

/// The `p` quantile of χ² with `dof` degrees of freedom.
pub fn chi2_quantile(p: f64, dof: usize) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidParameter(format!("probability {p} outside (0, 1)")));
    }
    if p > 0.5 {
        chi2_upper_quantile(1.0 - p, dof)
    } else {
        solve(p, dof, false)
    }
}

/// The point with upper tail probability `tail`.
pub fn chi2_upper_quantile(tail: f64, dof: usize) -> Result<f64> {
    if !(tail > 0.0 && tail < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "tail probability {tail} outside (0, 1)"
        )));
    }
    if tail >= 0.5 {
        solve(1.0 - tail, dof, false)
    } else {
        solve(tail, dof, true)
    }
}

/// Root of `cdf(x) = target` (or `sf(x) = target` when `upper`), bracketed
/// and refined by Newton steps that fall back to bisection.
fn solve(target: f64, dof: usize, upper: bool) -> Result<f64> {
    if dof == 0 {
        return Err(Error::InvalidParameter(
            "chi-squared needs at least one degree of freedom".into(),
        ));
    }
    let k = dof as f64;
    // Residual increasing in x.
    let resid = |x: f64| {
        if upper {
            target - chi2_sf(x, k)
        } else {
            chi2_cdf(x, k) - target
        }
    };
    let mut lo = 0.0;
    let mut hi = k.max(1.0);
    while resid(hi) < 0.0 {
        lo = hi;
        hi *= 2.0;
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        let r = resid(x);
        if r.abs() <= 1e-15 || hi - lo <= 1e-15 * hi {
            return Ok(x);
        }
        if r < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let slope = chi2_ln_pdf(x, k).exp();
        let newton = x - r / slope;
        x = if slope > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    #[test]
    fn exponential_median() {
        let q = chi2_quantile(0.5, 2).unwrap();
        assert!((q - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn table_value_for_ten_dof() {
        let q = chi2_quantile(0.95, 10).unwrap();
        assert!((q - 18.307_038_053_275_146).abs() < 1e-9);
    }

    #[test]
    fn ln_gamma_at_integers() {
        let mut fact = 1.0f64;
        for n in 1..30 {
            assert!((ln_gamma(n as f64) - fact.ln()).abs() < 1e-12 * fact.ln().abs().max(1.0));
            fact *= n as f64;
        }
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-13);
    }

    #[test]
    fn round_trips_against_an_independent_cdf() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..500 {
            let p: f64 = rng.random_range(1e-6..1.0 - 1e-6);
            let dof = rng.random_range(1..200usize);
            let q = chi2_quantile(p, dof).unwrap();
            let cdf = ChiSquared::new(dof as f64).unwrap().cdf(q);
            assert!((cdf - p).abs() <= 1e-10, "p={p} dof={dof} q={q} cdf={cdf}");
        }
    }

    #[test]
    fn quantile_increases_toward_one() {
        let mut last = 0.0;
        for i in 1..1000 {
            let q = chi2_quantile(i as f64 / 1000.0, 7).unwrap();
            assert!(q > last);
            last = q;
        }
        assert!(chi2_upper_quantile(1e-12, 7).unwrap() > last);
        assert!(chi2_quantile(1.0, 3).is_err());
        assert!(chi2_quantile(0.5, 0).is_err());
    }
}
