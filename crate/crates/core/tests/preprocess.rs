mod common;

use common::{rng, two_pass_stats};
use ndarray::{Array2, Axis};
use probekit::preprocess::PreprocessError;
use probekit::Standardizer;
use proptest::prelude::*;
use rand::Rng;

fn offset_data(seed: u64, n: usize, p: usize) -> Array2<f32> {
    let mut rng = rng(seed);
    let offsets: Vec<f32> = (0..p).map(|_| rng.random_range(-100.0..100.0)).collect();
    let scales: Vec<f32> = (0..p).map(|_| rng.random_range(0.01..20.0)).collect();
    Array2::from_shape_fn((n, p), |(_, j)| {
        offsets[j] + scales[j] * rng.random_range(-1.0f32..1.0)
    })
}

#[test]
fn matches_two_pass_oracle() {
    let x = offset_data(1, 1000, 20);
    let s = Standardizer::fit(x.view(), 1e-8).unwrap();
    let (mean, std) = two_pass_stats(&x);
    for j in 0..20 {
        assert!((s.mean[j] - mean[j]).abs() < 1e-6, "mean {j}");
        assert!((s.std[j] - std[j]).abs() < 1e-6, "std {j}");
    }
}

#[test]
fn training_split_becomes_zero_mean_unit_std() {
    let x = offset_data(2, 1000, 20);
    let s = Standardizer::fit(x.view(), 1e-8).unwrap();
    let z = s.apply(x.view()).unwrap();
    let n = z.nrows() as f64;
    for col in z.axis_iter(Axis(1)) {
        let m = col.sum() / n;
        let sd = (col.mapv(|v| (v - m) * (v - m)).sum() / n).sqrt();
        assert!(m.abs() < 1e-5);
        assert!((sd - 1.0).abs() < 1e-4);
    }
}

#[test]
fn test_split_uses_training_statistics() {
    let train = offset_data(3, 500, 8);
    let test = offset_data(4, 50, 8);
    let s = Standardizer::fit(train.view(), 1e-8).unwrap();
    let z = s.apply(test.view()).unwrap();
    let (mean, std) = two_pass_stats(&train);
    for ((i, j), &v) in z.indexed_iter() {
        let expect = (test[[i, j]] as f64 - mean[j]) / std[j];
        assert!((v - expect).abs() < 1e-6 * expect.abs().max(1.0));
    }
}

#[test]
fn constant_columns_are_clamped_not_divided_by_zero() {
    let mut x = offset_data(5, 100, 4);
    x.column_mut(2).fill(3.5);
    let s = Standardizer::fit(x.view(), 1e-8).unwrap();
    assert_eq!(s.clamped_columns(), vec![2]);
    let z = s.apply(x.view()).unwrap();
    assert!(z.iter().all(|v| v.is_finite()));
    assert!(z.column(2).iter().all(|&v| v == 0.0));
}

#[test]
fn rejects_bad_inputs() {
    let x = offset_data(6, 1, 3);
    assert!(matches!(
        Standardizer::fit(x.view(), 1e-8),
        Err(PreprocessError::TooFewSamples(1))
    ));
    let x = offset_data(6, 5, 3);
    assert!(Standardizer::fit(x.view(), 0.0).is_err());
    let s = Standardizer::fit(x.view(), 1e-8).unwrap();
    let wrong = offset_data(7, 5, 4);
    assert!(matches!(
        s.apply(wrong.view()),
        Err(PreprocessError::DimensionMismatch {
            expected: 3,
            actual: 4
        })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn standardized_columns_are_centred(seed in any::<u64>(), n in 2usize..200, p in 1usize..10) {
        let x = offset_data(seed, n, p);
        let s = Standardizer::fit(x.view(), 1e-8).unwrap();
        let z = s.apply(x.view()).unwrap();
        for col in z.axis_iter(Axis(1)) {
            prop_assert!(col.sum().abs() / n as f64 <= 1e-6);
        }
        prop_assert!(s.std.iter().all(|&v| v >= 1e-8));
    }
}
