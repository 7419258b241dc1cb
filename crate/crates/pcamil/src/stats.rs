//! Paired statistical tests for comparing classifiers across folds and on
//! shared test patients.

use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};

use crate::metrics::MetricsError;

/// Paired Student's t-test outcome (two-sided).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TTestResult {
    pub t: f64,
    pub p: f64,
    pub df: usize,
}

/// Two-sided paired t-test on per-fold values.
///
/// Degenerate rule: when every difference is identical the statistic is
/// exact, so p = 1 for zero mean difference and p = 0 otherwise (t reported
/// as signed infinity).
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTestResult, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch);
    }
    let n = a.len();
    if n < 2 {
        return Err(MetricsError::TooFewFolds);
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    let df = n - 1;

    if sd == 0.0 {
        return Ok(if mean == 0.0 {
            TTestResult { t: 0.0, p: 1.0, df }
        } else {
            TTestResult {
                t: mean.signum() * f64::INFINITY,
                p: 0.0,
                df,
            }
        });
    }

    let t = mean / (sd / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, df as f64).expect("valid dof");
    let p = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    Ok(TTestResult { t, p, df })
}

/// McNemar's test outcome on two classifiers' per-patient correctness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McNemarResult {
    /// Patients classifier A got right and B got wrong.
    pub b_discordant: usize,
    /// Patients classifier A got wrong and B got right.
    pub c_discordant: usize,
    pub statistic: f64,
    pub p: f64,
    /// True when the exact binomial branch was used.
    pub exact: bool,
}

/// McNemar's test: exact two-sided binomial for up to 25 discordant pairs,
/// else the continuity-corrected chi-square approximation.
pub fn mcnemar_test(correct_a: &[bool], correct_b: &[bool]) -> Result<McNemarResult, MetricsError> {
    if correct_a.len() != correct_b.len() {
        return Err(MetricsError::LengthMismatch);
    }
    let mut b_disc = 0usize;
    let mut c_disc = 0usize;
    for (&a, &b) in correct_a.iter().zip(correct_b) {
        match (a, b) {
            (true, false) => b_disc += 1,
            (false, true) => c_disc += 1,
            _ => {}
        }
    }
    let n = b_disc + c_disc;

    if n <= 25 {
        let m = b_disc.min(c_disc);
        let p = (2.0 * binomial_cdf_half(n, m)).min(1.0);
        Ok(McNemarResult {
            b_discordant: b_disc,
            c_discordant: c_disc,
            statistic: m as f64,
            p,
            exact: true,
        })
    } else {
        let diff = b_disc.abs_diff(c_disc) as f64;
        let statistic = (diff - 1.0).powi(2) / n as f64;
        let chi = ChiSquared::new(1.0).expect("df 1");
        let p = (1.0 - chi.cdf(statistic)).clamp(0.0, 1.0);
        Ok(McNemarResult {
            b_discordant: b_disc,
            c_discordant: c_disc,
            statistic,
            p,
            exact: false,
        })
    }
}

/// P(X <= m) for X ~ Binomial(n, 1/2), exact for the n <= 25 range used by
/// the exact branch (dyadic rationals, no rounding).
fn binomial_cdf_half(n: usize, m: usize) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let mut coeff: u64 = 1;
    let mut sum: u64 = 1; // C(n, 0)
    for k in 1..=m {
        coeff = coeff * (n - k + 1) as u64 / k as u64;
        sum += coeff;
    }
    sum as f64 / (1u64 << n) as f64
}
