use super::*;
use crate::data::{AlignedFeatures, FeatureRow, SpilloverMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn col(name: &str, v: Vec<f64>) -> (String, Vec<f64>) {
    (name.to_string(), v)
}

#[test]
fn exact_linear_fit_hits_the_variance_floor() {
    let x: Vec<f64> = (0..30).map(|i| i as f64 * 0.37).collect();
    let y: Vec<f64> = x.iter().map(|v| 1.5 - 2.25 * v).collect();
    let fit = fit_gaussian_ols(&[col("x", x)], &y).unwrap();
    assert!((fit.coefficients[0] - 1.5).abs() < 1e-8);
    assert!((fit.coefficients[1] + 2.25).abs() < 1e-8);
    assert_eq!(fit.variance, VARIANCE_FLOOR);
    assert!(fit.log_likelihood.is_finite());
}

#[test]
fn intercept_only_matches_closed_form() {
    let y = [3.0, 5.0, 4.5, 9.0, 1.0, 2.5];
    let fit = fit_gaussian_ols(&[], &y).unwrap();
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let ll = -0.5 * n * ((2.0 * std::f64::consts::PI * var).ln() + 1.0);
    assert!((fit.coefficients[0] - mean).abs() < 1e-12);
    assert!((fit.log_likelihood - ll).abs() < 1e-10);
    assert!((fit.log_densities.iter().sum::<f64>() - fit.log_likelihood).abs() < 1e-12);
}

#[test]
fn rank_deficiency_names_the_collinear_column() {
    let a: Vec<f64> = (0..10).map(|i| i as f64).collect();
    let b: Vec<f64> = a.iter().map(|v| 2.0 * v + 1.0).collect();
    let y: Vec<f64> = (0..10).map(|i| (i * i) as f64).collect();
    match fit_gaussian_ols(&[col("a", a), col("b", b)], &y) {
        Err(crate::Error::RankDeficient { columns }) => assert_eq!(columns, vec!["b"]),
        other => panic!("{other:?}"),
    }
    assert!(fit_gaussian_ols(&[col("a", vec![1.0; 3])], &[1.0, 2.0, 3.0]).is_err());
}

fn features(rng: &mut ChaCha8Rng, n: usize, target: impl Fn(f64, &mut ChaCha8Rng) -> f64) -> AlignedFeatures {
    let k = SpilloverMode::EyeTracking.lags();
    let s: Vec<f64> = (0..n + k).map(|_| rng.random_range(0.0..10.0)).collect();
    let f: Vec<f64> = (0..n + k).map(|_| rng.random_range(0.0..12.0)).collect();
    let l: Vec<f64> = (0..n + k).map(|_| rng.random_range(1..12) as f64).collect();
    let lag = |v: &[f64], i: usize| (0..=k).map(|d| v[i - d]).collect::<Vec<_>>();
    AlignedFeatures {
        rows: (k..n + k)
            .map(|i| FeatureRow {
                item_id: "it".into(),
                word_index: i,
                word: "w".into(),
                measure_ms: target(s[i], rng),
                surprisal: lag(&s, i),
                log_freq: lag(&f, i),
                length: lag(&l, i),
            })
            .collect(),
        dropped: k,
    }
}

#[test]
fn constant_surprisal_gives_zero_delta() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut f = features(&mut rng, 80, |_, r| 250.0 + r.random_range(-20.0..20.0));
    for row in &mut f.rows {
        row.surprisal = vec![4.2; 3];
    }
    let d = delta_ll(&f, SpilloverMode::EyeTracking).unwrap();
    assert!(d.delta_ll.abs() < 1e-9, "{}", d.delta_ll);
}

#[test]
fn surprisal_driven_target_gives_growing_positive_delta() {
    let noise = Normal::new(0.0, 5.0).unwrap();
    let mut last = 0.0;
    for n in [50, 200, 800] {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = features(&mut rng, n, |s, r| 2.0 * s + noise.sample(r));
        let d = delta_ll(&f, SpilloverMode::EyeTracking).unwrap();
        assert!(d.delta_ll > last, "n={n}: {}", d.delta_ll);
        assert!((d.per_word.iter().sum::<f64>() - d.delta_ll).abs() < 1e-12);
        last = d.delta_ll;
    }
}

#[test]
fn delta_delta_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f = features(&mut rng, 40, |s, r| s + r.random_range(0.0..1.0));
    let base = delta_ll(&f, SpilloverMode::EyeTracking).unwrap();
    assert_eq!(delta_delta_ll(&base, &base).unwrap().value, 0.0);
    let mut shifted = base.clone();
    shifted.delta_ll += 0.7;
    assert!((delta_delta_ll(&base, &shifted).unwrap().value - 0.7).abs() < 1e-12);
    shifted.keys.pop();
    assert!(delta_delta_ll(&base, &shifted).is_err());
}

#[test]
fn permutation_examples() {
    let a: Vec<f64> = (0..100).map(|i| (i as f64).sin()).collect();
    assert_eq!(permutation_test(&a, &a, 1000, 0, Alternative::Greater).unwrap(), 1.0);
    let b: Vec<f64> = a.iter().map(|v| v - 10.0).collect();
    let p = permutation_test(&a, &b, DEFAULT_PERMUTATIONS, 0, Alternative::Greater).unwrap();
    assert!(p <= 0.001);
    assert!(p > 0.0);
    assert!(permutation_test(&a[..1], &b[..1], 100, 0, Alternative::Greater).is_err());
    assert_eq!(
        permutation_test(&a, &b, 500, 9, Alternative::TwoSided).unwrap(),
        permutation_test(&a, &b, 500, 9, Alternative::TwoSided).unwrap()
    );
    assert_eq!(bonferroni(0.02, 10), 0.2);
    assert_eq!(bonferroni(0.2, 10), 1.0);
}

#[test]
fn pearson_examples() {
    let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
    assert!((pearson_r(&x, &x).unwrap().r - 1.0).abs() < 1e-15);
    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    assert!((pearson_r(&x, &neg).unwrap().r + 1.0).abs() < 1e-15);
    // hand-computed: x = 0..9, y = [2, 1, 4, 3, 6, 5, 8, 7, 10, 9]
    let y = [2.0, 1.0, 4.0, 3.0, 6.0, 5.0, 8.0, 7.0, 10.0, 9.0];
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - 4.5) * (b - 5.5)).sum();
    let sxx = 82.5;
    let syy = 82.5;
    assert_eq!(sxy, 77.5);
    let c = pearson_r(&x, &y).unwrap();
    assert!((c.r - sxy / (sxx * syy as f64).sqrt()).abs() < 1e-15);
    assert!(c.p < 0.001);
    assert!(pearson_r(&x, &[1.0; 10]).is_err());
    assert!(pearson_r(&x[..2], &y[..2]).is_err());
}

#[test]
fn fisher_examples() {
    let pooled = fisher_z_weighted_mean(&[0.0, 0.5], &[1.0, 1.0]).unwrap();
    assert!((pooled - (0.5f64.atanh() / 2.0).tanh()).abs() < 1e-12);
    assert!((pooled - 0.2680).abs() < 1e-4);
    assert!((fisher_z_weighted_mean(&[0.3, 0.3, 0.3], &[1.0, 5.0, 2.0]).unwrap() - 0.3).abs() < 1e-15);
    assert!((fisher_z_weighted_mean(&[-0.7], &[3.0]).unwrap() + 0.7).abs() < 1e-15);
    assert!(fisher_z_weighted_mean(&[1.0], &[1.0]).is_err());
    assert!(fisher_z_weighted_mean(&[0.1], &[0.0]).is_err());
}

/// `y` with correlation exactly `r` to `x`: `r·x̂ + √(1−r²)·ẑ` for orthonormal
/// centered `x̂`, `ẑ`.
fn with_correlation(x: &[f64], z: &[f64], r: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let center = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / n;
        v.iter().map(|a| a - m).collect::<Vec<_>>()
    };
    let unit = |v: Vec<f64>| {
        let s = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.into_iter().map(|a| a / s).collect::<Vec<_>>()
    };
    let xh = unit(center(x));
    let zc = center(z);
    let proj: f64 = zc.iter().zip(&xh).map(|(a, b)| a * b).sum();
    let zh = unit(zc.iter().zip(&xh).map(|(a, b)| a - proj * b).collect());
    xh.iter().zip(&zh).map(|(a, b)| r * a + (1.0 - r * r).sqrt() * b).collect()
}

#[test]
fn pre_post_split_examples() {
    let keys: Vec<u64> = (1..=12).map(|k| k * 100).collect();
    let loss: Vec<f64> = (0..12).map(|i| 6.0 - 0.3 * i as f64).collect();
    // ΔLL falls with loss before index 6 and rises after
    let dll: Vec<f64> = (0..12).map(|i| if i < 6 { 5.0 - loss[i] } else { loss[i] }).collect();
    let zip = |v: &[f64]| keys.iter().copied().zip(v.iter().copied()).collect::<Vec<_>>();
    let pp = pre_post_transition_correlation(&zip(&loss), &zip(&dll), Some(6)).unwrap();
    assert!(pp.pre.unwrap().r < 0.0);
    assert!(pp.post.unwrap().r > 0.0);
    let pp = pre_post_transition_correlation(&zip(&loss), &zip(&dll), Some(0)).unwrap();
    assert!(pp.pre.is_none());
    assert!(pp.post.is_some());

    // series built to the reported sign pattern
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let z: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut target = with_correlation(&loss[..6], &z[..6], -0.971);
    target.extend(with_correlation(&loss[6..], &z[6..], 0.811));
    let pp = pre_post_transition_correlation(&zip(&loss), &zip(&target), Some(6)).unwrap();
    assert!((pp.pre.unwrap().r + 0.971).abs() < 1e-6);
    assert!((pp.post.unwrap().r - 0.811).abs() < 1e-6);

    let mut bad = zip(&dll);
    bad[0].0 = 1;
    assert!(pre_post_transition_correlation(&zip(&loss), &bad, None).is_err());
}

#[test]
fn ks_detects_non_uniform_samples() {
    let even: Vec<f64> = (0..200).map(|i| (i as f64 + 0.5) / 200.0).collect();
    assert!(ks_uniform(&even).unwrap().1 > 0.99);
    let skewed: Vec<f64> = even.iter().map(|v| v * v).collect();
    assert!(ks_uniform(&skewed).unwrap().1 < 0.01);
}
