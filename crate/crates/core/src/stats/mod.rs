//! Reading-time regressions, ΔLL and ΔΔLL, permutation tests and correlations.

mod ols;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::seed::derived_rng;

pub use ols::{delta_delta_ll, delta_ll, fit_gaussian_ols, DeltaDeltaLl, DeltaLl, FitResult, RegressionSpec, VARIANCE_FLOOR};

pub const DEFAULT_PERMUTATIONS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    /// Mean of `a − b` at least as large as observed.
    #[default]
    Greater,
    /// Absolute mean difference at least as large as observed.
    TwoSided,
}

/// Paired sign-flip permutation test on `a − b`. Each permutation swaps the two
/// labels of every word independently with probability 1/2. Returns
/// `(count + 1) / (n_perm + 1)` where `count` is the number of permutations whose
/// statistic reaches the observed one.
pub fn permutation_test(a: &[f64], b: &[f64], n_perm: usize, seed: u64, alternative: Alternative) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Stats(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::Stats("permutation test needs at least 2 words".into()));
    }
    if n_perm == 0 {
        return Err(Error::Stats("need at least one permutation".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::Stats("non-finite paired difference".into()));
    }
    let n = d.len() as f64;
    let stat = |flip: &dyn Fn(usize) -> bool| -> f64 {
        let s: f64 = d.iter().enumerate().map(|(i, &v)| if flip(i) { -v } else { v }).sum();
        s / n
    };
    let observed = stat(&|_| false);
    // absorbs rounding between algebraically equal statistics
    let tol = 1e-9 * d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let count: usize = (0..n_perm)
        .into_par_iter()
        .map(|r| {
            use rand::Rng;
            let mut rng = derived_rng(seed, r as u64, 0x5eed);
            let bits: Vec<u64> = (0..d.len().div_ceil(64)).map(|_| rng.random()).collect();
            let s = stat(&|i| bits[i / 64] >> (i % 64) & 1 == 1);
            let hit = match alternative {
                Alternative::Greater => s >= observed - tol,
                Alternative::TwoSided => s.abs() >= observed.abs() - tol,
            };
            hit as usize
        })
        .sum();
    Ok((count + 1) as f64 / (n_perm + 1) as f64)
}

/// `min(1, p · m)`.
pub fn bonferroni(p: f64, comparisons: usize) -> f64 {
    (p * comparisons as f64).min(1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    /// Two-sided p from the t distribution with n − 2 degrees of freedom.
    pub p: f64,
    pub n: usize,
}

pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<Correlation> {
    let n = x.len();
    if n != y.len() {
        return Err(Error::Stats("correlation inputs differ in length".into()));
    }
    if n < 3 {
        return Err(Error::Stats(format!("correlation needs at least 3 points, got {n}")));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if !(sxx > 0.0 && syy > 0.0) {
        return Err(Error::Stats("correlation undefined for a constant series".into()));
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p = if r.abs() >= 1.0 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Stats(e.to_string()))?;
        (2.0 * (1.0 - dist.cdf(t.abs()))).min(1.0)
    };
    Ok(Correlation { r, p, n })
}

/// `tanh(Σ wᵢ atanh(rᵢ) / Σ wᵢ)`.
pub fn fisher_z_weighted_mean(rs: &[f64], weights: &[f64]) -> Result<f64> {
    if rs.is_empty() || rs.len() != weights.len() {
        return Err(Error::Stats("need one weight per correlation".into()));
    }
    if let Some(r) = rs.iter().find(|r| !(r.abs() < 1.0)) {
        return Err(Error::Stats(format!("cannot pool r = {r}")));
    }
    if weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
        return Err(Error::Stats("weights must be positive".into()));
    }
    let total: f64 = weights.iter().sum();
    let z: f64 = rs.iter().zip(weights).map(|(r, w)| r.atanh() * w).sum::<f64>() / total;
    Ok(z.tanh())
}

/// Correlations of ΔLL with loss strictly before, and at or after, a breakthrough.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrePost {
    pub pre: Option<Correlation>,
    pub post: Option<Correlation>,
}

/// `loss` and `dll` are (tokens_seen, value) per checkpoint with identical keys;
/// `breakthrough` is an index into them (none puts every point before it). A side
/// with fewer than 3 points is absent.
pub fn pre_post_transition_correlation(
    loss: &[(u64, f64)],
    dll: &[(u64, f64)],
    breakthrough: Option<usize>,
) -> Result<PrePost> {
    if loss.len() != dll.len() || loss.iter().zip(dll).any(|(a, b)| a.0 != b.0) {
        return Err(Error::Stats("loss and ΔLL series have different checkpoints".into()));
    }
    let split = breakthrough.unwrap_or(loss.len()).min(loss.len());
    let side = |range: std::ops::Range<usize>| -> Result<Option<Correlation>> {
        if range.len() < 3 {
            return Ok(None);
        }
        let x: Vec<f64> = loss[range.clone()].iter().map(|p| p.1).collect();
        let y: Vec<f64> = dll[range].iter().map(|p| p.1).collect();
        match pearson_r(&x, &y) {
            Ok(c) => Ok(Some(c)),
            Err(Error::Stats(_)) => Ok(None),
            Err(e) => Err(e),
        }
    };
    Ok(PrePost {
        pre: side(0..split)?,
        post: side(split..loss.len())?,
    })
}

/// One-sample Kolmogorov–Smirnov test against U(0, 1): (D, asymptotic p).
pub fn ks_uniform(samples: &[f64]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Stats("KS test needs samples".into()));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let d = s
        .iter()
        .enumerate()
        .map(|(i, &x)| ((i + 1) as f64 / n - x).max(x - i as f64 / n))
        .fold(0.0, f64::max);
    let sn = n.sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    let mut p = 0.0;
    for j in 1..=100 {
        let term = 2.0 * (-1f64).powi(j - 1) * (-2.0 * (j as f64 * lambda).powi(2)).exp();
        p += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    Ok((d, p.clamp(0.0, 1.0)))
}

#[cfg(test)]
mod tests;
