//! t-tests on the Student t distribution, t-curves and bootstrap intervals.
//!
//! p-values are two-tailed throughout.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::rng_for;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("all samples have zero variance")]
    ZeroVariance,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, StatsError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

const LANCZOS_G: f64 = 7.0;
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

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // Reflection keeps the series in its accurate range.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..100_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(b, a, 1.0 - x) / b
    }
}

/// `P(|T| ≥ |t|)` for Student's t with `df` degrees of freedom.
pub fn two_tailed_p(t: f64, df: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    if t.is_infinite() {
        return 0.0;
    }
    reg_inc_beta(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0)
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Welch's unequal-variance t-test of `mean(a) − mean(b)`.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    let got = a.len().min(b.len());
    if got < 2 {
        return Err(StatsError::TooFewSamples { needed: 2, got });
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (qa, qb) = (va / na, vb / nb);
    if qa + qb == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    let t = (ma - mb) / (qa + qb).sqrt();
    let df = (qa + qb).powi(2) / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
    Ok(TTestResult { t, df, p: two_tailed_p(t, df) })
}

pub fn one_sample_t(values: &[f64], mu0: f64) -> Result<TTestResult> {
    if values.len() < 2 {
        return Err(StatsError::TooFewSamples { needed: 2, got: values.len() });
    }
    let (m, v) = mean_var(values);
    if v == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    let n = values.len() as f64;
    let t = (m - mu0) / (v / n).sqrt();
    let df = n - 1.0;
    Ok(TTestResult { t, df, p: two_tailed_p(t, df) })
}

/// The `t > 0` with `two_tailed_p(t, df) = alpha`, by bisection.
pub fn t_threshold(df: f64, alpha: f64) -> Result<f64> {
    if !(df > 0.0) || !(alpha > 0.0 && alpha < 1.0) {
        return Err(StatsError::InvalidArgument(format!("df={df}, alpha={alpha}")));
    }
    let mut hi = 1.0;
    while two_tailed_p(hi, df) > alpha {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if two_tailed_p(mid, df) > alpha {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 * hi.max(1.0) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub t: f64,
    pub df: f64,
    pub p: f64,
    /// t at which this epoch's Welch test would reach `alpha`.
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TCurve {
    /// One entry per epoch; `None` where the test is degenerate.
    pub points: Vec<Option<CurvePoint>>,
    /// 1-based epoch of the first `p < alpha`.
    pub first_significant: Option<usize>,
}

/// Welch t per epoch of other-author against same-author losses, so that a
/// model preferring its own author gives positive t.
pub fn t_curve(same: &[Vec<f64>], other: &[Vec<f64>], alpha: f64) -> Result<TCurve> {
    if same.len() != other.len() {
        return Err(StatsError::InvalidArgument("epoch counts differ".into()));
    }
    let points: Vec<Option<CurvePoint>> = same
        .iter()
        .zip(other)
        .map(|(s, o)| {
            let r = welch_t(o, s).ok()?;
            Some(CurvePoint { t: r.t, df: r.df, p: r.p, threshold: t_threshold(r.df, alpha).ok()? })
        })
        .collect();
    let first_significant = points.iter().position(|p| p.is_some_and(|p| p.p < alpha)).map(|e| e + 1);
    Ok(TCurve { points, first_significant })
}

/// Percentile bootstrap interval of the mean.
pub fn bootstrap_ci(samples: &[f64], level: f64, n_resamples: usize, seed: u64) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(StatsError::TooFewSamples { needed: 1, got: 0 });
    }
    if !(level > 0.0 && level < 1.0) || n_resamples == 0 {
        return Err(StatsError::InvalidArgument(format!("level={level}, n_resamples={n_resamples}")));
    }
    let mut rng = rng_for(seed, &["bootstrap"]);
    let n = samples.len();
    let mut means: Vec<f64> = (0..n_resamples)
        .map(|_| (0..n).map(|_| samples[rng.gen_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok((quantile(&means, tail), quantile(&means, 1.0 - tail)))
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos.fract());
    if i + 1 >= sorted.len() {
        sorted[sorted.len() - 1]
    } else {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn ln_gamma_known_values() {
        assert_relative_eq!(ln_gamma(1.0), 0.0, epsilon = 1e-14);
        assert_relative_eq!(ln_gamma(5.0), 24f64.ln(), epsilon = 1e-13);
        assert_relative_eq!(ln_gamma(0.5), std::f64::consts::PI.sqrt().ln(), epsilon = 1e-14);
    }

    #[test]
    fn welch_reference() {
        let r = welch_t(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert!((r.t + 3.674_234_614).abs() < 1e-6);
        assert!((r.df - 4.0).abs() < 1e-12);
        assert!((r.p - 0.021_311_641).abs() < 1e-6);
    }

    #[test]
    fn identical_samples() {
        let a = [1.0, 2.0, 4.0];
        let r = welch_t(&a, &a).unwrap();
        assert_eq!(r.t, 0.0);
        assert!((r.p - 1.0).abs() < 1e-12);
        assert_eq!(welch_t(&[1.0, 1.0], &[2.0, 2.0]), Err(StatsError::ZeroVariance));
    }

    #[test]
    fn one_sample_cases() {
        let r = one_sample_t(&[1.0, -1.0], 0.0).unwrap();
        assert_eq!(r.t, 0.0);
        assert!((r.p - 1.0).abs() < 1e-12);
        assert!(one_sample_t(&[3.0, 3.0, 3.0], 0.0).is_err());
    }

    #[test]
    fn thresholds() {
        assert!((t_threshold(1e6, 0.001).unwrap() - 3.290_5).abs() < 1e-3);
        assert!((t_threshold(4.0, 0.05).unwrap() - 2.776_4).abs() < 1e-4);
        assert!(t_threshold(4.0, 1.0).is_err());
    }

    #[test]
    fn bootstrap_bounds() {
        assert_eq!(bootstrap_ci(&[2.5; 5], 0.95, 1000, 0).unwrap(), (2.5, 2.5));
        let (lo, hi) = bootstrap_ci(&[0.0, 1.0], 0.95, 10_000, 1).unwrap();
        assert!(lo >= 0.0 && hi <= 1.0);
        assert_eq!(bootstrap_ci(&[1.0, 3.0, 8.0], 0.9, 500, 4), bootstrap_ci(&[1.0, 3.0, 8.0], 0.9, 500, 4));
    }

    #[test]
    fn curve_of_identical_epochs_is_flat() {
        let e = vec![vec![1.0, 2.0, 3.0]; 4];
        let c = t_curve(&e, &e, 0.001).unwrap();
        assert!(c.points.iter().all(|p| p.unwrap().t == 0.0));
        assert_eq!(c.first_significant, None);
    }
}
