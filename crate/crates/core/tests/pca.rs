mod common;

use common::{center_columns, covariance_pca, gaussian, rng};
use ndarray::{s, Array2};
use probekit::pca::{default_k_max, fit_pca, read_pca_blob, write_pca_blob, PcaError};
use probekit::Standardizer;
use proptest::prelude::*;

fn max_abs(a: &Array2<f64>) -> f64 {
    a.iter().fold(0.0, |m: f64, v| m.max(v.abs()))
}

fn same_up_to_sign(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    let plus = (&a - &b).iter().fold(0.0, |m: f64, v| m.max(v.abs()));
    let minus = (&a + &b).iter().fold(0.0, |m: f64, v| m.max(v.abs()));
    plus.min(minus)
}

#[test]
fn matches_covariance_eigendecomposition() {
    let mut r = rng(11);
    let mut x = gaussian(&mut r, 50, 6);
    for j in 0..6 {
        x.column_mut(j).mapv_inplace(|v| v * (j + 1) as f64);
    }
    let x = center_columns(&x);
    let model = fit_pca(x.view(), 6).unwrap();
    let (eig, vecs) = covariance_pca(&x);
    let total: f64 = eig.iter().sum();
    for (i, e) in eig.iter().enumerate() {
        assert!((model.explained_variance_ratio[i] - e / total).abs() < 1e-6);
        assert!(same_up_to_sign(model.components.row(i), vecs.row(i)) < 1e-6);
    }
}

#[test]
fn wide_matrix_uses_gram_route_and_agrees() {
    let mut r = rng(12);
    let x = center_columns(&gaussian(&mut r, 12, 30));
    let model = fit_pca(x.view(), 11).unwrap();
    let (eig, vecs) = covariance_pca(&x);
    let total: f64 = eig.iter().sum();
    for (i, e) in eig.iter().take(11).enumerate() {
        assert!((model.explained_variance_ratio[i] - e / total).abs() < 1e-6);
        assert!(same_up_to_sign(model.components.row(i), vecs.row(i)) < 1e-6);
    }
    let gram = model.components.dot(&model.components.t());
    assert!(max_abs(&(gram - Array2::<f64>::eye(11))) < 1e-9);
}

#[test]
fn isotropic_sample_spreads_variance_evenly() {
    let mut r = rng(13);
    let x = center_columns(&gaussian(&mut r, 10_000, 4));
    let model = fit_pca(x.view(), 4).unwrap();
    for &ratio in model.explained_variance_ratio.iter() {
        assert!((ratio - 0.25).abs() < 0.02, "{ratio}");
    }
}

#[test]
fn full_rank_projection_is_an_isometry() {
    let mut r = rng(14);
    let x = center_columns(&gaussian(&mut r, 40, 7));
    let model = fit_pca(x.view(), 7).unwrap();
    let z = model.project(x.view(), 7).unwrap();
    for i in 0..40 {
        for j in 0..40 {
            let a = &x.row(i) - &x.row(j);
            let b = &z.row(i) - &z.row(j);
            assert!((a.dot(&a).sqrt() - b.dot(&b).sqrt()).abs() < 1e-5);
        }
    }
}

#[test]
fn rank_one_reconstruction_error_is_the_tail_energy() {
    let mut r = rng(15);
    let x = center_columns(&gaussian(&mut r, 30, 5));
    let model = fit_pca(x.view(), 5).unwrap();
    let v1 = model.components.slice(s![..1, ..]);
    let recon = x.dot(&v1.t()).dot(&v1);
    let err: f64 = (&x - &recon).iter().map(|v| v * v).sum();
    let tail: f64 = model.singular_values.iter().skip(1).map(|s| s * s).sum();
    assert!((err - tail).abs() < 1e-6 * tail.max(1.0));
}

#[test]
fn k_max_bounds_are_enforced() {
    let mut r = rng(16);
    let x = center_columns(&gaussian(&mut r, 10, 20));
    assert!(matches!(
        fit_pca(x.view(), 0),
        Err(PcaError::KMaxOutOfRange { .. })
    ));
    assert!(matches!(
        fit_pca(x.view(), 10),
        Err(PcaError::KMaxOutOfRange { .. })
    ));
    assert_eq!(default_k_max(10, 20, 4096), 9);
    assert_eq!(default_k_max(5000, 20000, 4096), 4096);
    let model = fit_pca(x.view(), 9).unwrap();
    assert!(matches!(
        model.project(x.view(), 10),
        Err(PcaError::DOutOfRange { .. })
    ));
    assert!(matches!(
        model.project(x.slice(s![.., ..19]), 3),
        Err(PcaError::WidthMismatch { .. })
    ));
}

#[test]
fn blob_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(17);
    let x = center_columns(&gaussian(&mut r, 25, 6));
    let model = fit_pca(x.view(), 4).unwrap();
    let std = Standardizer::identity(6);
    let path = dir.path().join("m.pca");
    write_pca_blob(&path, &std, &model).unwrap();
    let (s2, m2) = read_pca_blob(&path).unwrap();
    assert_eq!(s2, std);
    assert_eq!(m2, model);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn components_are_orthonormal_and_ordered(seed in any::<u64>(), n in 3usize..60, p in 1usize..25) {
        let mut r = rng(seed);
        let x = center_columns(&gaussian(&mut r, n, p));
        let k = (n - 1).min(p);
        let model = fit_pca(x.view(), k).unwrap();
        let gram = model.components.dot(&model.components.t());
        prop_assert!(max_abs(&(gram - Array2::<f64>::eye(k))) < 1e-8);
        let sv = &model.singular_values;
        prop_assert!(sv.windows(2).into_iter().all(|w| w[0] >= w[1] - 1e-12));
        // the full rank limit explains all the variance of centred data
        prop_assert!((model.explained_variance_cumulative(k).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn projection_energy_equals_squared_singular_value(seed in any::<u64>(), n in 3usize..50, p in 1usize..12) {
        let mut r = rng(seed);
        let x = center_columns(&gaussian(&mut r, n, p));
        let k = (n - 1).min(p);
        let model = fit_pca(x.view(), k).unwrap();
        let z = model.project(x.view(), k).unwrap();
        for i in 0..k {
            let energy: f64 = z.column(i).iter().map(|v| v * v).sum();
            let expect = model.singular_values[i].powi(2);
            prop_assert!((energy - expect).abs() <= 1e-8 * expect.max(1.0));
        }
    }

    #[test]
    fn projections_are_nested(seed in any::<u64>(), n in 3usize..50, p in 2usize..12) {
        let mut r = rng(seed);
        let x = center_columns(&gaussian(&mut r, n, p));
        let k = (n - 1).min(p);
        let model = fit_pca(x.view(), k).unwrap();
        let full = model.project(x.view(), k).unwrap();
        for d in 1..=k {
            let part = model.project(x.view(), d).unwrap();
            prop_assert!(max_abs(&(part - full.slice(s![.., ..d]))) == 0.0);
        }
        let cum: Vec<f64> = (1..=k).map(|d| model.explained_variance_cumulative(d).unwrap()).collect();
        prop_assert!(cum.windows(2).all(|w| w[1] >= w[0]));
    }
}
