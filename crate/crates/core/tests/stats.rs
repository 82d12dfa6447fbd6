use nalgebra::{DMatrix, DVector};
use phaselab::data::{AlignedFeatures, FeatureRow, SpilloverMode};
use phaselab::stats::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn columns(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<(String, Vec<f64>)> {
    (0..k)
        .map(|c| (format!("x{c}"), (0..n).map(|_| rng.random_range(-3.0..3.0)).collect()))
        .collect()
}

#[test]
fn ols_matches_normal_equations() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 50;
        let cols = columns(&mut rng, n, 4);
        let y: Vec<f64> = (0..n)
            .map(|i| 1.0 + cols.iter().enumerate().map(|(c, v)| (c as f64 - 1.5) * v.1[i]).sum::<f64>() + rng.random_range(-1.0..1.0))
            .collect();
        let fit = fit_gaussian_ols(&cols, &y).unwrap();

        let x = DMatrix::from_fn(n, 5, |i, j| if j == 0 { 1.0 } else { cols[j - 1].1[i] });
        let yv = DVector::from_vec(y.clone());
        let beta = (x.transpose() * &x).try_inverse().unwrap() * x.transpose() * &yv;
        let resid = &yv - &x * &beta;
        let var = resid.norm_squared() / n as f64;
        let ll: f64 = resid
            .iter()
            .map(|r| -0.5 * (2.0 * std::f64::consts::PI * var).ln() - r * r / (2.0 * var))
            .sum();
        for (a, b) in fit.coefficients.iter().zip(beta.iter()) {
            assert!((a - b).abs() < 1e-9, "seed {seed}: {a} vs {b}");
        }
        assert!((fit.variance - var).abs() < 1e-9);
        assert!((fit.log_likelihood - ll).abs() < 1e-8);
    }
}

/// Rows with `surprisal` from `s`, predictors random, target from `target`.
fn features(n: usize, seed: u64, target: impl Fn(&[f64], &mut ChaCha8Rng) -> f64, s_seed: u64) -> AlignedFeatures {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut srng = ChaCha8Rng::seed_from_u64(s_seed);
    let mode = SpilloverMode::SelfPaced;
    let k = mode.lags();
    let draw = |r: &mut ChaCha8Rng, lo: f64, hi: f64| (0..n + k).map(|_| r.random_range(lo..hi)).collect::<Vec<_>>();
    let f = draw(&mut rng, 0.0, 12.0);
    let l = draw(&mut rng, 1.0, 10.0);
    let s = draw(&mut srng, 0.0, 15.0);
    let lag = |v: &[f64], i: usize| (0..=k).map(|d| v[i - d]).collect::<Vec<_>>();
    let rows = (k..n + k)
        .map(|i| {
            let sur = lag(&s, i);
            FeatureRow {
                item_id: format!("item{}", i / 20),
                word_index: i,
                word: "w".into(),
                measure_ms: target(&sur, &mut rng) + 0.2 * f[i],
                surprisal: sur,
                log_freq: lag(&f, i),
                length: lag(&l, i),
            }
        })
        .collect();
    AlignedFeatures { rows, dropped: k }
}

#[test]
fn per_word_delta_sums_to_total() {
    let noise = Normal::new(0.0, 3.0).unwrap();
    let f = features(300, 1, |s, r| 200.0 + 1.5 * s[0] + noise.sample(r), 2);
    let d = delta_ll(&f, SpilloverMode::SelfPaced).unwrap();
    assert!((d.per_word.iter().sum::<f64>() - d.delta_ll).abs() < 1e-9 * d.delta_ll.abs().max(1.0));
    assert!((d.full.log_likelihood - d.base.log_likelihood - d.delta_ll).abs() < 1e-8);
    assert_eq!(d.keys.len(), 300);
}

#[test]
fn delta_delta_is_antisymmetric_and_additive() {
    let noise = Normal::new(0.0, 4.0).unwrap();
    let target = |s: &[f64], r: &mut ChaCha8Rng| 250.0 + s[0] + 0.5 * s[1] + noise.sample(r);
    let a = delta_ll(&features(120, 3, target, 10), SpilloverMode::SelfPaced).unwrap();
    let b = delta_ll(&features(120, 3, target, 11), SpilloverMode::SelfPaced).unwrap();
    let c = delta_ll(&features(120, 3, target, 12), SpilloverMode::SelfPaced).unwrap();
    let ab = delta_delta_ll(&a, &b).unwrap().value;
    let ba = delta_delta_ll(&b, &a).unwrap().value;
    let bc = delta_delta_ll(&b, &c).unwrap().value;
    let ac = delta_delta_ll(&a, &c).unwrap().value;
    assert!((ab + ba).abs() < 1e-9);
    assert!((ab + bc - ac).abs() < 1e-9);
}

#[test]
fn null_permutation_p_values_are_uniform() {
    // two unrelated surprisal sources against a target that ignores both
    let noise = Normal::new(0.0, 10.0).unwrap();
    let p: Vec<f64> = (0..200u64)
        .map(|r| {
            let target = |_: &[f64], rng: &mut ChaCha8Rng| 300.0 + noise.sample(rng);
            let a = delta_ll(&features(80, r, target, 1000 + r), SpilloverMode::SelfPaced).unwrap();
            let b = delta_ll(&features(80, r, target, 5000 + r), SpilloverMode::SelfPaced).unwrap();
            permutation_test(&a.per_word, &b.per_word, 499, r, Alternative::Greater).unwrap()
        })
        .collect();
    let (d, pval) = ks_uniform(&p).unwrap();
    assert!(pval > 0.01, "KS D {d} p {pval}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn delta_ll_is_affine_invariant(scale in 0.1f64..50.0, shift in -500.0f64..500.0, seed in 0u64..1000) {
        let noise = Normal::new(0.0, 2.0).unwrap();
        let f = features(100, seed, |s, r| 100.0 + 0.8 * s[0] + noise.sample(r), seed + 1);
        let mut g = f.clone();
        for row in &mut g.rows {
            row.measure_ms = row.measure_ms * scale + shift;
        }
        let a = delta_ll(&f, SpilloverMode::SelfPaced).unwrap().delta_ll;
        let b = delta_ll(&g, SpilloverMode::SelfPaced).unwrap().delta_ll;
        prop_assert!((a - b).abs() < 1e-6 * a.abs().max(1.0), "{} vs {}", a, b);
    }

    #[test]
    fn permutation_is_shift_invariant(
        a in prop::collection::vec(-5.0f64..5.0, 5..40),
        c in -100.0f64..100.0,
        seed in 0u64..100,
    ) {
        let b: Vec<f64> = a.iter().map(|v| v * 0.5 - 0.3).collect();
        let a2: Vec<f64> = a.iter().map(|v| v + c).collect();
        let b2: Vec<f64> = b.iter().map(|v| v + c).collect();
        let p1 = permutation_test(&a, &b, 200, seed, Alternative::TwoSided).unwrap();
        let p2 = permutation_test(&a2, &b2, 200, seed, Alternative::TwoSided).unwrap();
        prop_assert_eq!(p1, p2);
    }
}
