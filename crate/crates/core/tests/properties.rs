use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use sirdetect::baseline_hc::hc_statistic_xy;
use sirdetect::detect::{calibrate, compute_statistics, run_test, EigenMode, TestConfig};
use sirdetect::models::{self, build_covariance, CovarianceSpec, Dataset, Link, ModelSpec};
use sirdetect::sir::{self, slice_xy};
use sirdetect::sparse_eig::{
    exact_sparse_eigenvalue, sdp_best_effort, sdp_sparse_eigenvalue, soft_threshold_bound, SdpSettings,
};
use sirdetect::Execution;

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn random_psd(seed: u64, p: usize) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.gen_range(1..=p + 2);
    let g = gaussian(&mut rng, p, m);
    &g * g.transpose() / m as f64
}

fn tight() -> SdpSettings {
    SdpSettings { max_iterations: 20_000, ..SdpSettings::with_tolerance(1e-9) }
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Kolmogorov-Smirnov distance to a continuous cdf.
fn ks_distance(mut values: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = cdf(v);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

fn linear_dataset(seed: u64, n: usize, p: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = gaussian(&mut rng, n, p);
    let beta = DVector::from_fn(p, |j, _| if j < 2 { 1.0 } else { 0.0 });
    let y = &x * beta + DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    Dataset::new(x, y).unwrap()
}

fn permute_rows(data: &Dataset, seed: u64) -> Dataset {
    let mut order: Vec<usize> = (0..data.n()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let x = DMatrix::from_fn(data.n(), data.p(), |i, j| data.x[(order[i], j)]);
    let y = DVector::from_fn(data.n(), |i, _| data.y[order[i]]);
    Dataset::new(x, y).unwrap()
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(32) })]

    #[test]
    fn toeplitz_entries_are_exact_powers(rho in 0.0f64..0.95, p in 1usize..30) {
        let sigma = build_covariance(&CovarianceSpec::toeplitz(rho, p), &[]).unwrap();
        for i in 0..p {
            for j in 0..p {
                prop_assert_eq!(sigma[(i, j)], rho.powi(i.abs_diff(j) as i32));
            }
        }
    }

    #[test]
    fn slicing_ignores_strictly_increasing_transforms(seed in any::<u64>(), h in 2usize..8) {
        let data = linear_dataset(seed, 120, 4);
        let y: Vec<f64> = data.y.iter().copied().collect();
        let transformed: Vec<f64> = y.iter().map(|v| (v / 4.0).exp()).collect();
        let a = slice_xy(&data.x, &y, h).unwrap();
        let b = slice_xy(&data.x, &transformed, h).unwrap();
        prop_assert_eq!(a.lambda_hat(), b.lambda_hat());
    }

    #[test]
    fn slicing_is_row_permutation_invariant(seed in any::<u64>(), h in 2usize..8) {
        let data = linear_dataset(seed, 100, 3);
        let shuffled = permute_rows(&data, seed ^ 0x5eed);
        prop_assert_eq!(sir::slice(&data, h).unwrap(), sir::slice(&shuffled, h).unwrap());
    }

    #[test]
    fn top_eigenvalue_is_nonnegative_and_matches_gram(seed in any::<u64>(), h in 2usize..8) {
        let data = linear_dataset(seed, 80, 6);
        let s = sir::slice(&data, h).unwrap();
        let top = s.top_eigenvalue();
        prop_assert!(top >= 0.0);
        let full = s.lambda_hat().symmetric_eigenvalues().max();
        prop_assert!((top - full).abs() <= 1e-12 * full.max(1.0));
    }

    #[test]
    fn exact_is_monotone_in_ks_and_full_at_p(seed in any::<u64>(), p in 2usize..9) {
        let a = random_psd(seed, p);
        let mut last = f64::NEG_INFINITY;
        for ks in 1..=p {
            let v = exact_sparse_eigenvalue(&a, ks).unwrap().value;
            prop_assert!(v >= last - 1e-12);
            last = v;
        }
        let lambda = a.symmetric_eigenvalues().max();
        prop_assert!((last - lambda).abs() <= 1e-10 * lambda.max(1.0));
    }

    #[test]
    fn sandwich_holds_for_every_threshold(seed in any::<u64>(), p in 2usize..=12, ks in 1usize..=4, z in 0.0f64..2.0) {
        let ks = ks.min(p);
        let a = random_psd(seed, p);
        let exact = exact_sparse_eigenvalue(&a, ks).unwrap().value;
        let sdp = sdp_best_effort(&a, ks, &tight()).unwrap();
        let lambda = a.symmetric_eigenvalues().max();
        prop_assert!(exact <= sdp.value + 1e-6);
        prop_assert!(sdp.value <= lambda + 1e-6);
        prop_assert!(sdp.value <= soft_threshold_bound(&a, z, ks) + 1e-6);
    }

    #[test]
    fn values_scale_linearly(seed in any::<u64>(), p in 2usize..=8, ks in 1usize..=3, c in 0.01f64..100.0) {
        let ks = ks.min(p);
        let a = random_psd(seed, p);
        let scaled = &a * c;
        let e = exact_sparse_eigenvalue(&a, ks).unwrap().value;
        let es = exact_sparse_eigenvalue(&scaled, ks).unwrap().value;
        prop_assert!(close(es / e, c, 1e-8));
        let s = sdp_best_effort(&a, ks, &tight()).unwrap().value;
        let ss = sdp_best_effort(&scaled, ks, &tight()).unwrap().value;
        prop_assert!(close(ss / s, c, 1e-8));
    }

    #[test]
    fn sdp_iterate_is_feasible(seed in any::<u64>(), p in 2usize..=12, ks in 1usize..=4, iters in 1usize..50) {
        let ks = ks.min(p);
        let a = random_psd(seed, p);
        let settings = SdpSettings { max_iterations: iters, ..SdpSettings::with_tolerance(1e-12) };
        let m = match sdp_sparse_eigenvalue(&a, ks, &settings) {
            Ok(r) => r.m_matrix,
            Err(sirdetect::sparse_eig::SparseEigError::DidNotConverge(r)) => r.m_matrix,
            Err(e) => panic!("{e}"),
        };
        prop_assert!((m.trace() - 1.0).abs() <= 1e-9);
        prop_assert!(m.iter().map(|v| v.abs()).sum::<f64>() <= ks as f64 + 1e-9);
        prop_assert!(m.clone().symmetric_eigenvalues().min() >= -1e-9);
        prop_assert!((&m - m.transpose()).abs().max() <= 1e-12);
    }

    #[test]
    fn hc_is_invariant_to_response_scale(seed in any::<u64>(), c in prop_oneof![-50.0f64..-0.01, 0.01f64..50.0]) {
        let data = linear_dataset(seed, 200, 20);
        let y: Vec<f64> = data.y.iter().copied().collect();
        let scaled: Vec<f64> = y.iter().map(|v| c * v).collect();
        let a = hc_statistic_xy(&data.x, &y).unwrap();
        let b = hc_statistic_xy(&data.x, &scaled).unwrap();
        prop_assert!(close(a.hc_score, b.hc_score, 1e-9));
        for (s, t) in a.t_stats.iter().zip(&b.t_stats) {
            prop_assert!((s.abs() - t.abs()).abs() <= 1e-9 * s.abs().max(1.0));
        }
    }

    #[test]
    fn hc_follows_column_permutations(seed in any::<u64>()) {
        let data = linear_dataset(seed, 150, 15);
        let mut cols: Vec<usize> = (0..15).collect();
        cols.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(1)));
        let permuted = DMatrix::from_fn(150, 15, |i, j| data.x[(i, cols[j])]);
        let y: Vec<f64> = data.y.iter().copied().collect();
        let a = hc_statistic_xy(&data.x, &y).unwrap();
        let b = hc_statistic_xy(&permuted, &y).unwrap();
        for (j, &c) in cols.iter().enumerate() {
            prop_assert_eq!(b.t_stats[j], a.t_stats[c]);
        }
        prop_assert!(close(a.hc_score, b.hc_score, 1e-12));
    }
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(6) })]

    #[test]
    fn spectral_rejections_ignore_increasing_transforms(seed in any::<u64>()) {
        let data = linear_dataset(seed, 200, 8);
        let cfg = TestConfig { mode: EigenMode::Exact, n_null: 40, ..TestConfig::new(2) };
        let thresholds = calibrate(&data.x, &cfg, seed, &Execution::Sequential).unwrap();
        let y = DVector::from_iterator(data.n(), data.y.iter().map(|v| v.powi(3) + 2.0 * v));
        let transformed = Dataset::new(data.x.clone(), y).unwrap();
        let a = run_test(&data, &thresholds, &cfg).unwrap();
        let b = run_test(&transformed, &thresholds, &cfg).unwrap();
        prop_assert_eq!(a.reject_psi1, b.reject_psi1);
        prop_assert_eq!(a.reject_psi2, b.reject_psi2);
        prop_assert_eq!(a.statistics.lambda_max, b.statistics.lambda_max);
    }

    #[test]
    fn statistics_ignore_row_order(seed in any::<u64>(), link in prop_oneof![Just("I"), Just("III"), Just("VI"), Just("cubic3")]) {
        let spec = ModelSpec { s: 3, ..ModelSpec::new(Link::parse(link).unwrap()) };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = models::generate(&spec, &CovarianceSpec::toeplitz(0.3, 10), 200, &mut rng).unwrap();
        let shuffled = permute_rows(&data, seed);
        let cfg = TestConfig { mode: EigenMode::Exact, ..TestConfig::new(3) };
        let a = compute_statistics(&data, &cfg).unwrap();
        let b = compute_statistics(&shuffled, &cfg).unwrap();
        prop_assert_eq!(a.lambda_max, b.lambda_max);
        prop_assert_eq!(a.sparse_eig, b.sparse_eig);
        prop_assert!(close(a.anova_t, b.anova_t, 1e-10));
        let ha = sirdetect::hc_statistic(&data).unwrap().hc_score;
        let hb = sirdetect::hc_statistic(&shuffled).unwrap().hc_score;
        prop_assert!(close(ha, hb, 1e-9));
    }

    #[test]
    fn same_seed_same_outcome(seed in any::<u64>()) {
        let data = linear_dataset(seed, 150, 6);
        let cfg = TestConfig { mode: EigenMode::Sdp, n_null: 20, ..TestConfig::new(2) };
        let run = || {
            let t = calibrate(&data.x, &cfg, seed, &Execution::default()).unwrap();
            serde_json::to_string(&run_test(&data, &t, &cfg).unwrap()).unwrap()
        };
        prop_assert_eq!(run(), run());
    }
}

#[test]
fn null_responses_are_standard_normal() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let data = models::generate(&ModelSpec::null(), &CovarianceSpec::identity(3), 10_000, &mut rng).unwrap();
    let d = ks_distance(data.y.iter().copied().collect(), normal_cdf);
    assert!(d < 1.628 / 100.0, "KS distance {d}");
}

#[test]
fn null_hc_p_values_are_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let data = models::generate(&ModelSpec::null(), &CovarianceSpec::identity(5), 10_000, &mut rng).unwrap();
    let y: Vec<f64> = data.y.iter().copied().collect();
    let mut worst: f64 = 0.0;
    for j in 0..5 {
        // p-values of column j across 2000 independent blocks of 5 rows
        let values: Vec<f64> = (0..2000)
            .map(|b| {
                let rows = b * 5..b * 5 + 5;
                let x = DMatrix::from_fn(5, 1, |i, _| data.x[(rows.start + i, j)]);
                hc_statistic_xy(&x, &y[rows]).unwrap().p_values[0]
            })
            .collect();
        worst = worst.max(ks_distance(values, |u| u.clamp(0.0, 1.0)));
    }
    assert!(worst < 1.628 / 2000f64.sqrt(), "KS distance {worst}");
}

#[test]
fn cubic_example_has_no_marginal_correlation() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let spec = ModelSpec::new(Link::CubicExample { k: 5 });
    let data = models::generate(&spec, &CovarianceSpec::identity(8), 100_000, &mut rng).unwrap();
    for j in 0..5 {
        let m = data.x.column(j).dot(&data.y) / data.n() as f64;
        assert!(m.abs() <= 0.02, "E[x_{j} y] = {m}");
    }
}

#[test]
fn sliced_signal_exceeds_lemma_fraction() {
    let (n, p, nu) = (5000, 5, 2.0);
    let beta = DVector::from_vec(vec![1.0, -1.0, 0.5, 0.0, 0.0]);
    let lambda = sir::gsnr_linear(&beta, &DMatrix::identity(p, p), 1.0).unwrap().lambda;
    let eta = &beta / beta.norm();
    let hits = (0..200u64)
        .filter(|&r| {
            let mut rng = ChaCha8Rng::seed_from_u64(24);
            rng.set_stream(r);
            let x = gaussian(&mut rng, n, p);
            let y = &x * &beta + DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let s = sir::slice(&Dataset::new(x, y).unwrap(), sir::DEFAULT_SLICES).unwrap();
            let q = (eta.transpose() * s.lambda_hat() * &eta)[(0, 0)];
            q >= (1.0 - 1.0 / (2.0 * nu)) * lambda
        })
        .count();
    assert!(hits >= 190, "{hits} of 200");
}
