//! Cohort summaries, Student-t intervals, paired t-tests and Bonferroni adjustment.

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};

/// Two-sided comparisons in a cohort table (three baselines against the reference).
pub const DEFAULT_COMPARISONS: usize = 3;

const QUANTILE_HI: f64 = 1e3;
const QUANTILE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (n - 1).
    pub sd: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Student-t CDF with `df` degrees of freedom.
pub fn t_cdf(t: f64, df: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    if t.is_infinite() {
        return if t > 0.0 { 1.0 } else { 0.0 };
    }
    let tail = 0.5 * beta_reg(df / 2.0, 0.5, df / (df + t * t));
    if t >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Two-sided p-value for a t statistic.
pub fn t_two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    beta_reg(df / 2.0, 0.5, df / (df + t * t)).min(1.0)
}

/// Quantile `q` in [0.5, 1) of the t distribution, by bisection on [0, 1000].
pub fn t_quantile(q: f64, df: f64) -> Result<f64> {
    if !(0.5..1.0).contains(&q) || !(df > 0.0) {
        return Err(Error::Stats(format!("t quantile needs q in [0.5, 1) and df > 0, got q={q}, df={df}")));
    }
    let (mut lo, mut hi) = (0.0, QUANTILE_HI);
    if t_cdf(hi, df) < q {
        return Err(Error::Stats(format!("t quantile {q} at df={df} exceeds {QUANTILE_HI}")));
    }
    while hi - lo > QUANTILE_TOL * hi.max(1.0) {
        let mid = 0.5 * (lo + hi);
        if t_cdf(mid, df) < q {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Mean, sample SD and the 95% t interval.
pub fn summarize(values: &[f64]) -> Result<Summary> {
    let n = values.len();
    if n < 2 {
        return Err(Error::Stats(format!("summary needs at least 2 values, got {n}")));
    }
    let (mean, sd) = mean_sd(values);
    let half = t_quantile(0.975, (n - 1) as f64)? * sd / (n as f64).sqrt();
    Ok(Summary {
        n,
        mean,
        sd,
        ci_low: mean - half,
        ci_high: mean + half,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: usize,
    pub p: f64,
}

/// Paired two-sided t-test on `a - b`. Zero-variance differences give
/// p = 1 when the mean difference is zero and p = 0 (t = ±inf) otherwise.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Stats(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Stats(format!("paired t-test needs at least 2 pairs, got {n}")));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (mean, sd) = mean_sd(&d);
    let df = n - 1;
    // Differences that are equal up to round-off (e.g. a constant shift applied
    // in floating point) count as zero variance.
    let scale = d.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if sd <= 8.0 * f64::EPSILON * scale {
        return Ok(if mean == 0.0 {
            TTest { t: 0.0, df, p: 1.0 }
        } else {
            TTest {
                t: mean.signum() * f64::INFINITY,
                df,
                p: 0.0,
            }
        });
    }
    let t = mean / (sd / (n as f64).sqrt());
    Ok(TTest {
        t,
        df,
        p: t_two_sided_p(t, df as f64),
    })
}

pub fn bonferroni(p: f64, k: usize) -> f64 {
    (p * k.max(1) as f64).min(1.0)
}
