//! Seeded synthetic layer families with a controllable collapse point.
//!
//! Each layer places the class means on a regular simplex inside a
//! `signal_dim`-dimensional subspace, embedded into the layer's feature space
//! by a random orthonormal basis. Samples are a class mean plus isotropic
//! within-class noise inside the subspace plus ambient noise in its
//! orthogonal complement.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::activation_io::{
    write_activation_set, ActivationSet, FormatError, Label, LayerEntry, Manifest, Split,
};
use crate::probes::{evaluate_accuracy, fit_ncc, predict_ncc, ProbeError};
use crate::seeds::derive_seed;

/// Within-class std used on collapsed layers, relative to the smallest
/// distance between class means.
pub const COLLAPSED_WITHIN_FACTOR: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid layer family spec: {0}")]
    Invalid(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error("spec {path}: {message}")]
    Spec { path: String, message: String },
}

fn default_mean_norm() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFamilySpec {
    pub n_layers: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub n_classes: usize,
    /// Feature count of each layer.
    pub dims: Vec<usize>,
    /// Dimension of the subspace holding the class means.
    pub signal_dim: usize,
    /// Within-class std per layer (inside the signal subspace).
    pub within_std: Vec<f64>,
    /// Std of the ambient noise in the orthogonal complement.
    pub noise_dims_std: f64,
    /// From this layer on, within-class std drops to
    /// `COLLAPSED_WITHIN_FACTOR` times the class-mean separation.
    #[serde(default)]
    pub collapse_at: Option<usize>,
    pub seed: u64,
    /// Norm of every class mean.
    #[serde(default = "default_mean_norm")]
    pub class_mean_norm: f64,
}

impl LayerFamilySpec {
    /// Nine layers, ten classes, collapse from layer 5 on. The collapsed
    /// layers narrow so NC1 keeps falling through the ambient noise.
    pub fn collapse_demo() -> Self {
        LayerFamilySpec {
            n_layers: 9,
            n_train: 1000,
            n_test: 500,
            n_classes: 10,
            dims: vec![64, 64, 64, 64, 64, 56, 48, 40, 32],
            signal_dim: 9,
            within_std: vec![1.2, 1.0, 0.85, 0.7, 0.55, 0.5, 0.5, 0.5, 0.5],
            noise_dims_std: 0.01,
            collapse_at: Some(5),
            seed: 0,
            class_mean_norm: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Invalid(m));
        if self.n_layers == 0 {
            return bad("n_layers must be >= 1".into());
        }
        if self.dims.len() != self.n_layers || self.within_std.len() != self.n_layers {
            return bad(format!(
                "dims ({}) and within_std ({}) must both have n_layers = {} entries",
                self.dims.len(),
                self.within_std.len(),
                self.n_layers
            ));
        }
        if self.n_classes < 2 || self.n_classes > Label::MAX as usize + 1 {
            return bad(format!(
                "n_classes must be in [2, 65536], got {}",
                self.n_classes
            ));
        }
        if self.n_train < self.n_classes || self.n_test == 0 {
            return bad("n_train must be >= n_classes and n_test >= 1".into());
        }
        let min_dim = *self.dims.iter().min().expect("nonempty");
        if self.signal_dim == 0 || self.signal_dim > min_dim {
            return bad(format!(
                "signal_dim must be in [1, min(dims) = {min_dim}], got {}",
                self.signal_dim
            ));
        }
        if self.within_std.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad("within_std entries must be positive".into());
        }
        if !(self.noise_dims_std >= 0.0 && self.noise_dims_std.is_finite()) {
            return bad("noise_dims_std must be >= 0".into());
        }
        if !(self.class_mean_norm > 0.0 && self.class_mean_norm.is_finite()) {
            return bad("class_mean_norm must be positive".into());
        }
        if let Some(c) = self.collapse_at {
            if c >= self.n_layers {
                return bad(format!(
                    "collapse_at = {c} must be < n_layers = {}",
                    self.n_layers
                ));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SynthError> {
        let err = |message: String| SynthError::Spec {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let spec: LayerFamilySpec = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Within-class std actually used on `layer`.
    pub fn effective_within_std(&self, layer: usize) -> f64 {
        match self.collapse_at {
            Some(c) if layer >= c => COLLAPSED_WITHIN_FACTOR * self.mean_separation(),
            _ => self.within_std[layer],
        }
    }

    /// `dims[layer] x signal_dim` orthonormal embedding of the signal subspace.
    pub fn signal_basis(&self, layer: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[layer as u64, 0]));
        random_orthonormal_columns(self.dims[layer], self.signal_dim, &mut rng)
    }

    /// Smallest distance between two class means.
    pub fn mean_separation(&self) -> f64 {
        min_pairwise_distance(&self.class_means().view())
    }

    /// `C x signal_dim` class means: a regular simplex when
    /// `signal_dim >= C - 1`, otherwise a seeded orthogonal projection of one.
    pub fn class_means(&self) -> Array2<f64> {
        let c = self.n_classes;
        let simplex = simplex_vertices(c);
        let mut means = Array2::zeros((c, self.signal_dim));
        if self.signal_dim >= c - 1 {
            means.slice_mut(ndarray::s![.., ..c - 1]).assign(&simplex);
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[u64::MAX]));
            let basis = random_orthonormal_columns(c - 1, self.signal_dim, &mut rng);
            means.assign(&simplex.dot(&basis));
        }
        let norm = means
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt())
            .fold(0.0, f64::max);
        means * (self.class_mean_norm / norm)
    }
}

fn min_pairwise_distance(points: &ArrayView2<'_, f64>) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..points.nrows() {
        for j in i + 1..points.nrows() {
            let diff = &points.row(i) - &points.row(j);
            best = best.min(diff.dot(&diff).sqrt());
        }
    }
    best
}

/// Vertices of a regular simplex centred at the origin, in `C − 1`
/// coordinates (Helmert basis of the sum-zero subspace of `R^C`).
fn simplex_vertices(c: usize) -> Array2<f64> {
    let mut v = Array2::zeros((c, c - 1));
    for k in 1..c {
        let scale = 1.0 / ((k * (k + 1)) as f64).sqrt();
        for i in 0..c {
            // h_k = (1, .., 1, -k, 0, ..) with k leading ones
            let h = if i < k {
                1.0
            } else if i == k {
                -(k as f64)
            } else {
                0.0
            };
            v[[i, k - 1]] = h * scale;
        }
    }
    v
}

/// `p x k` matrix with orthonormal columns drawn from the Haar measure.
fn random_orthonormal_columns(p: usize, k: usize, rng: &mut impl Rng) -> Array2<f64> {
    let mut q = Array2::<f64>::zeros((p, k));
    for j in 0..k {
        loop {
            let mut v = Array1::from_shape_fn(p, |_| rng.sample::<f64, _>(StandardNormal));
            for _ in 0..2 {
                for i in 0..j {
                    let col = q.column(i);
                    let proj = v.dot(&col);
                    v.scaled_add(-proj, &col);
                }
            }
            let norm = v.dot(&v).sqrt();
            if norm > 1e-8 {
                q.column_mut(j).assign(&(v / norm));
                break;
            }
        }
    }
    q
}

fn balanced_labels(n: usize, c: usize) -> Vec<Label> {
    (0..n).map(|i| (i % c) as Label).collect()
}

struct LayerSampler {
    basis: Array2<f64>,
    means: Array2<f64>,
    within: f64,
    noise: f64,
}

impl LayerSampler {
    fn sample(&self, labels: &[Label], rng: &mut impl Rng) -> Array2<f32> {
        let (p, k) = self.basis.dim();
        let mut out = Array2::<f32>::zeros((labels.len(), p));
        for (mut row, &label) in out.rows_mut().into_iter().zip(labels) {
            let mut signal = self.means.row(label as usize).to_owned();
            signal.mapv_inplace(|m| m + self.within * rng.sample::<f64, _>(StandardNormal));
            let mut x = self.basis.dot(&signal);
            if self.noise > 0.0 {
                let h = Array1::from_shape_fn(p, |_| rng.sample::<f64, _>(StandardNormal));
                // component of h orthogonal to the signal subspace
                let coef = self.basis.t().dot(&h);
                let mut ortho = h;
                for i in 0..k {
                    ortho.scaled_add(-coef[i], &self.basis.column(i));
                }
                x.scaled_add(self.noise, &ortho);
            }
            row.iter_mut()
                .zip(x.iter())
                .for_each(|(o, &v)| *o = v as f32);
        }
        out
    }
}

/// Train/test activation sets for every layer, with `network_preds` from the
/// NCC rule on the final layer.
pub fn generate_layer_family(
    spec: &LayerFamilySpec,
) -> Result<Vec<(ActivationSet, ActivationSet)>, SynthError> {
    spec.validate()?;
    let means = spec.class_means();
    let train_labels = balanced_labels(spec.n_train, spec.n_classes);
    let test_labels = balanced_labels(spec.n_test, spec.n_classes);

    let mut layers: Vec<(ActivationSet, ActivationSet)> = (0..spec.n_layers)
        .into_par_iter()
        .map(|l| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[l as u64, 1]));
            let sampler = LayerSampler {
                basis: spec.signal_basis(l),
                means: means.clone(),
                within: spec.effective_within_std(l),
                noise: spec.noise_dims_std,
            };
            let make = |split, labels: &[Label], data| ActivationSet {
                layer_id: format!("layer{l}"),
                split,
                n_classes: spec.n_classes,
                data,
                labels: labels.to_vec(),
                network_preds: None,
            };
            let train = make(
                Split::Train,
                &train_labels,
                sampler.sample(&train_labels, &mut rng),
            );
            let test = make(
                Split::Test,
                &test_labels,
                sampler.sample(&test_labels, &mut rng),
            );
            (train, test)
        })
        .collect();

    let (last_train, last_test) = layers.last().expect("n_layers >= 1");
    let to_f64 = |s: &ActivationSet| s.data.mapv(|v| v as f64);
    let head = fit_ncc(
        to_f64(last_train).view(),
        &last_train.labels,
        spec.n_classes,
    )?;
    let train_preds = predict_ncc(&head, to_f64(last_train).view())?;
    let test_preds = predict_ncc(&head, to_f64(last_test).view())?;
    for (train, test) in &mut layers {
        train.network_preds = Some(train_preds.clone());
        test.network_preds = Some(test_preds.clone());
    }
    Ok(layers)
}

/// Test accuracy of the simulated network head.
pub fn network_accuracy(layers: &[(ActivationSet, ActivationSet)]) -> Option<f64> {
    let (_, test) = layers.last()?;
    let preds = test.network_preds.as_ref()?;
    evaluate_accuracy(preds, &test.labels).ok()
}

/// Generates the family and writes one `PROBEAK1` file per (layer, split) plus
/// `manifest.json` into `out_dir`.
pub fn write_layer_family(spec: &LayerFamilySpec, out_dir: &Path) -> Result<Manifest, SynthError> {
    let layers = generate_layer_family(spec)?;
    std::fs::create_dir_all(out_dir).map_err(|e| FormatError::Io {
        path: out_dir.to_path_buf(),
        source: e,
    })?;
    let mut entries = Vec::new();
    for (train, test) in &layers {
        let train_name = format!("{}.train.pak", train.layer_id);
        let test_name = format!("{}.test.pak", test.layer_id);
        write_activation_set(train, &out_dir.join(&train_name))?;
        write_activation_set(test, &out_dir.join(&test_name))?;
        entries.push(LayerEntry {
            layer_id: train.layer_id.clone(),
            train_path: train_name.into(),
            test_path: test_name.into(),
            dim: train.n_features(),
            tap_point: Some("synthetic".into()),
        });
    }
    let manifest = Manifest {
        layers: entries,
        network_accuracy: network_accuracy(&layers),
        n_classes: Some(spec.n_classes),
        base_dir: out_dir.to_path_buf(),
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Isotropic Gaussian blobs around seeded random centres whose pairwise
/// distances are all at least `separation`. Labels are balanced.
pub fn make_blobs(
    n: usize,
    n_classes: usize,
    d: usize,
    within_std: f64,
    separation: f64,
    seed: u64,
) -> Result<ActivationSet, SynthError> {
    if n < n_classes || n_classes < 2 || d == 0 {
        return Err(SynthError::Invalid(format!(
            "make_blobs needs n >= n_classes >= 2 and d >= 1 (n={n}, classes={n_classes}, d={d})"
        )));
    }
    if !(within_std >= 0.0 && separation >= 0.0) {
        return Err(SynthError::Invalid(
            "stds and separation must be >= 0".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut half_width = separation.max(1e-12) * (n_classes as f64).powf(1.0 / d as f64);
    let mut centers: Vec<Array1<f64>> = Vec::with_capacity(n_classes);
    let mut misses = 0;
    while centers.len() < n_classes {
        let cand = Array1::from_shape_fn(d, |_| rng.random_range(-half_width..=half_width));
        let ok = centers.iter().all(|c| {
            let diff = c - &cand;
            diff.dot(&diff).sqrt() >= separation
        });
        if ok {
            centers.push(cand);
            misses = 0;
        } else {
            misses += 1;
            if misses > 1000 {
                half_width *= 1.5;
                misses = 0;
            }
        }
    }
    let labels = balanced_labels(n, n_classes);
    let mut data = Array2::<f32>::zeros((n, d));
    for (mut row, &label) in data.rows_mut().into_iter().zip(&labels) {
        let c = &centers[label as usize];
        for (o, &m) in row.iter_mut().zip(c.iter()) {
            *o = (m + within_std * rng.sample::<f64, _>(StandardNormal)) as f32;
        }
    }
    Ok(ActivationSet {
        layer_id: "blobs".into(),
        split: Split::Train,
        n_classes,
        data,
        labels,
        network_preds: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simplex_is_regular_and_centred() {
        let v = simplex_vertices(5);
        let centroid = v.sum_axis(ndarray::Axis(0));
        assert!(centroid.iter().all(|x| x.abs() < 1e-12));
        let norms: Vec<f64> = v.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        for n in &norms {
            assert!((n - (4.0f64 / 5.0).sqrt()).abs() < 1e-12);
        }
        let d01 = &v.row(0) - &v.row(1);
        let d34 = &v.row(3) - &v.row(4);
        assert!((d01.dot(&d01) - d34.dot(&d34)).abs() < 1e-12);
    }

    #[test]
    fn orthonormal_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random_orthonormal_columns(12, 5, &mut rng);
        let g = q.t().dot(&q);
        for i in 0..5 {
            for j in 0..5 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g[[i, j]] - want).abs() < 1e-12);
            }
        }
    }

    fn small_spec() -> LayerFamilySpec {
        LayerFamilySpec {
            n_layers: 3,
            n_train: 60,
            n_test: 30,
            n_classes: 3,
            dims: vec![8, 6, 5],
            signal_dim: 2,
            within_std: vec![0.5, 0.3, 0.1],
            noise_dims_std: 0.05,
            collapse_at: Some(2),
            seed: 9,
            class_mean_norm: 2.0,
        }
    }

    #[test]
    fn spec_validation() {
        assert!(small_spec().validate().is_ok());
        let mut s = small_spec();
        s.signal_dim = 6;
        assert!(s.validate().is_err());
        let mut s = small_spec();
        s.collapse_at = Some(3);
        assert!(s.validate().is_err());
        let mut s = small_spec();
        s.within_std[1] = 0.0;
        assert!(s.validate().is_err());
        let mut s = small_spec();
        s.dims.pop();
        assert!(s.validate().is_err());
    }

    #[test]
    fn generated_shapes_and_preds() {
        let layers = generate_layer_family(&small_spec()).unwrap();
        assert_eq!(layers.len(), 3);
        for (l, (train, test)) in layers.iter().enumerate() {
            assert_eq!(train.data.dim(), (60, small_spec().dims[l]));
            assert_eq!(test.data.dim(), (30, small_spec().dims[l]));
            assert!(train.validate().is_ok() && test.validate().is_ok());
            assert_eq!(train.split, Split::Train);
            assert_eq!(test.split, Split::Test);
        }
        assert_eq!(layers[0].1.network_preds, layers[2].1.network_preds);
    }

    #[test]
    fn means_have_requested_norm() {
        let s = small_spec();
        let m = s.class_means();
        for r in m.rows() {
            assert!((r.dot(&r).sqrt() - 2.0).abs() < 1e-12);
        }
        // projected simplex (signal_dim < C - 1 is not the case here: 2 = C - 1)
        let expected_sep = 2.0 * (2.0 * 3.0 / 2.0f64).sqrt();
        assert!((s.mean_separation() - expected_sep).abs() < 1e-12);
        assert!((s.effective_within_std(2) - 1e-3 * expected_sep).abs() < 1e-15);
        assert_eq!(s.effective_within_std(1), 0.3);
    }

    #[test]
    fn blobs_respect_separation() {
        let set = make_blobs(100, 5, 3, 0.1, 4.0, 2).unwrap();
        assert_eq!(set.data.dim(), (100, 3));
        let x = set.data.mapv(|v| v as f64);
        let ncc = fit_ncc(x.view(), &set.labels, 5).unwrap();
        assert!(min_pairwise_distance(&ncc.centroids.view()) > 3.0);
    }
}
