//! Confidence intervals and Welch's t-test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Two-sided t-distribution interval for the mean at `level` (e.g. 0.95).
/// Needs at least two samples.
pub fn confidence_interval(xs: &[f64], level: f64) -> Result<(f64, f64)> {
    if xs.len() < 2 {
        return Err(Error::InvalidArgument("confidence interval needs at least two runs".into()));
    }
    let n = xs.len() as f64;
    let m = mean(xs);
    let se = (sample_variance(xs) / n).sqrt();
    let t = StudentsT::new(0.0, 1.0, n - 1.0)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?
        .inverse_cdf(0.5 + level / 2.0);
    Ok((m - t * se, m + t * se))
}

/// Welch's unequal-variance t-test, two-sided.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WelchTest {
    #[serde(with = "crate::pipeline::report::float_or_string")]
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

/// Compares the means of `a` and `b` with unpooled variances and
/// Welch–Satterthwaite degrees of freedom. When both samples have zero
/// variance the test degenerates: equal means give `t = 0, p = 1`, different
/// means give `t = ±∞, p = 0`.
pub fn welch_test(a: &[f64], b: &[f64]) -> Result<WelchTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument("Welch's test needs at least two samples per group".into()));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (va, vb) = (sample_variance(a) / na, sample_variance(b) / nb);
    let diff = mean(a) - mean(b);
    let se2 = va + vb;
    if se2 == 0.0 {
        let df = na + nb - 2.0;
        return Ok(if diff == 0.0 {
            WelchTest { t: 0.0, df, p: 1.0 }
        } else {
            WelchTest {
                t: diff.signum() * f64::INFINITY,
                df,
                p: 0.0,
            }
        });
    }
    let t = diff / se2.sqrt();
    let df = se2 * se2 / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let p = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok(WelchTest { t, df, p })
}
