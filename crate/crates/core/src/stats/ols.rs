use serde::{Deserialize, Serialize};

use crate::data::{AlignedFeatures, FeatureRow, SpilloverMode};
use crate::error::{Error, Result};

/// Residual variance floor that keeps the log-likelihood finite on perfect fits.
pub const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub struct RegressionSpec {
    pub mode: SpilloverMode,
    pub include_surprisal: bool,
}

impl RegressionSpec {
    /// Predictor names in design order (the intercept is implicit). Surprisal columns
    /// come last.
    pub fn feature_names(&self) -> Vec<String> {
        let k = self.mode.lags();
        let lagged = |stem: &str, prefix: &str| -> Vec<String> {
            (0..=k)
                .map(|d| match d {
                    0 => stem.to_string(),
                    1 => format!("prev_{prefix}"),
                    d => format!("prev{d}_{prefix}"),
                })
                .collect()
        };
        let mut names = lagged("freq", "freq");
        names.extend(lagged("len", "len"));
        if self.include_surprisal {
            names.extend(lagged("surprisal", "surp"));
        }
        names
    }

    /// Named predictor columns for `rows`.
    pub fn design(&self, rows: &[FeatureRow]) -> Result<Vec<(String, Vec<f64>)>> {
        let k = self.mode.lags();
        let take = |f: &dyn Fn(&FeatureRow) -> &Vec<f64>, d: usize| -> Result<Vec<f64>> {
            rows.iter()
                .map(|r| {
                    f(r).get(d).copied().ok_or_else(|| {
                        Error::Stats(format!("row {}:{} has fewer than {} lags", r.item_id, r.word_index, k))
                    })
                })
                .collect()
        };
        let mut cols = Vec::new();
        let mut name = self.feature_names().into_iter();
        let mut sources: Vec<&dyn Fn(&FeatureRow) -> &Vec<f64>> = vec![&|r| &r.log_freq, &|r| &r.length];
        if self.include_surprisal {
            sources.push(&|r| &r.surprisal);
        }
        for f in sources {
            for d in 0..=k {
                cols.push((name.next().expect("one name per column"), take(f, d)?));
            }
        }
        Ok(cols)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    /// Intercept first, then one coefficient per predictor column.
    pub coefficients: Vec<f64>,
    /// Maximum-likelihood residual variance (RSS / n), floored.
    pub variance: f64,
    pub log_densities: Vec<f64>,
    pub log_likelihood: f64,
    pub n_rows: usize,
}

/// Ordinary least squares with an intercept, solved by Householder QR, and the
/// Gaussian log-likelihood of the fit under the ML variance.
pub fn fit_gaussian_ols(columns: &[(String, Vec<f64>)], target: &[f64]) -> Result<FitResult> {
    let n = target.len();
    let p = columns.len() + 1;
    if n <= p {
        return Err(Error::Stats(format!("{n} rows cannot fit {p} coefficients")));
    }
    if let Some((name, _)) = columns.iter().find(|(_, c)| c.len() != n) {
        return Err(Error::Stats(format!("column {name} does not have {n} rows")));
    }
    if target.iter().chain(columns.iter().flat_map(|(_, c)| c)).any(|v| !v.is_finite()) {
        return Err(Error::Stats("non-finite value in regression data".into()));
    }
    // column-major design with the intercept first
    let mut a: Vec<Vec<f64>> = std::iter::once(vec![1.0; n])
        .chain(columns.iter().map(|(_, c)| c.clone()))
        .collect();
    let names: Vec<&str> = std::iter::once("(intercept)").chain(columns.iter().map(|(n, _)| n.as_str())).collect();
    let norms: Vec<f64> = a.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let mut y = target.to_vec();
    let mut deficient = Vec::new();
    for k in 0..p {
        let alpha = a[k][k..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if alpha <= 1e-10 * norms[k].max(f64::MIN_POSITIVE) {
            deficient.push(names[k].to_string());
            continue;
        }
        let alpha = if a[k][k] > 0.0 { -alpha } else { alpha };
        let mut v: Vec<f64> = a[k][k..].to_vec();
        v[0] -= alpha;
        let vv: f64 = v.iter().map(|x| x * x).sum();
        if vv == 0.0 {
            continue;
        }
        let reflect = |col: &mut [f64]| {
            let dot: f64 = col.iter().zip(&v).map(|(c, w)| c * w).sum();
            let f = 2.0 * dot / vv;
            col.iter_mut().zip(&v).for_each(|(c, w)| *c -= f * w);
        };
        for col in a.iter_mut().skip(k) {
            reflect(&mut col[k..]);
        }
        reflect(&mut y[k..]);
    }
    if !deficient.is_empty() {
        return Err(Error::RankDeficient { columns: deficient });
    }
    // back substitution on R β = Qᵀy
    let mut beta = vec![0.0; p];
    for k in (0..p).rev() {
        let s: f64 = (k + 1..p).map(|j| a[j][k] * beta[j]).sum();
        beta[k] = (y[k] - s) / a[k][k];
    }
    let residuals: Vec<f64> = (0..n)
        .map(|i| target[i] - beta[0] - columns.iter().zip(&beta[1..]).map(|((_, c), b)| c[i] * b).sum::<f64>())
        .collect();
    let rss: f64 = residuals.iter().map(|r| r * r).sum();
    let variance = (rss / n as f64).max(VARIANCE_FLOOR);
    let c = -0.5 * (2.0 * std::f64::consts::PI * variance).ln();
    let log_densities: Vec<f64> = residuals.iter().map(|r| c - r * r / (2.0 * variance)).collect();
    Ok(FitResult {
        coefficients: beta,
        variance,
        log_likelihood: log_densities.iter().sum(),
        log_densities,
        n_rows: n,
    })
}

/// Log-likelihood gain from adding the surprisal columns to the baseline regression.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaLl {
    pub delta_ll: f64,
    /// Per-row log-density difference (full − base); sums to `delta_ll`.
    pub per_word: Vec<f64>,
    /// (item id, word index) of every row.
    pub keys: Vec<(String, usize)>,
    pub base: FitResult,
    pub full: FitResult,
}

pub fn delta_ll(features: &AlignedFeatures, mode: SpilloverMode) -> Result<DeltaLl> {
    let target: Vec<f64> = features.rows.iter().map(|r| r.measure_ms).collect();
    let base_spec = RegressionSpec { mode, include_surprisal: false };
    let full_spec = RegressionSpec { mode, include_surprisal: true };
    let base = fit_gaussian_ols(&base_spec.design(&features.rows)?, &target)?;
    let mut cols = full_spec.design(&features.rows)?;
    let n_base = base.coefficients.len() - 1;
    // surprisal columns already spanned by the baseline add nothing; drop them
    let full = loop {
        match fit_gaussian_ols(&cols, &target) {
            Err(Error::RankDeficient { columns })
                if columns.iter().all(|c| cols[n_base..].iter().any(|(n, _)| n == c)) =>
            {
                cols.retain(|(n, _)| !columns.contains(n));
            }
            other => break other?,
        }
    };
    let per_word: Vec<f64> = full.log_densities.iter().zip(&base.log_densities).map(|(f, b)| f - b).collect();
    Ok(DeltaLl {
        // summed from the contributions so the two agree exactly
        delta_ll: per_word.iter().sum(),
        per_word,
        keys: features.rows.iter().map(|r| (r.item_id.clone(), r.word_index)).collect(),
        base,
        full,
    })
}

/// ΔLL(ablated) − ΔLL(baseline), with the paired per-word differences.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaDeltaLl {
    pub value: f64,
    pub per_word: Vec<f64>,
}

pub fn delta_delta_ll(baseline: &DeltaLl, ablated: &DeltaLl) -> Result<DeltaDeltaLl> {
    if baseline.keys != ablated.keys {
        return Err(Error::Stats("baseline and ablated ΔLL cover different words".into()));
    }
    Ok(DeltaDeltaLl {
        value: ablated.delta_ll - baseline.delta_ll,
        per_word: ablated.per_word.iter().zip(&baseline.per_word).map(|(a, b)| a - b).collect(),
    })
}
