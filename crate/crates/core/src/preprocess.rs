//! Per-feature standardization, fit on the training split only.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::activation_io::ActivationSet;

pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum PreprocessError {
    #[error("standardizer needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("dimension mismatch: standardizer has {expected} features, input has {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("epsilon must be positive and finite, got {0}")]
    BadEpsilon(f64),
}

/// Column means and population standard deviations (divide by `n`), with
/// every std clamped to at least `epsilon`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
    pub epsilon: f64,
}

impl Standardizer {
    pub fn identity(p: usize) -> Self {
        Standardizer {
            mean: Array1::zeros(p),
            std: Array1::ones(p),
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn n_features(&self) -> usize {
        self.mean.len()
    }

    /// Indices of columns whose std was clamped to epsilon.
    pub fn clamped_columns(&self) -> Vec<usize> {
        self.std
            .iter()
            .enumerate()
            .filter(|(_, &s)| s <= self.epsilon)
            .map(|(j, _)| j)
            .collect()
    }

    pub fn fit(data: ArrayView2<'_, f32>, epsilon: f64) -> Result<Self, PreprocessError> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(PreprocessError::BadEpsilon(epsilon));
        }
        let (n, p) = data.dim();
        if n < 2 {
            return Err(PreprocessError::TooFewSamples(n));
        }
        let nf = n as f64;
        let mut mean = Array1::<f64>::zeros(p);
        for row in data.rows() {
            Zip::from(&mut mean)
                .and(row)
                .for_each(|m, &x| *m += x as f64);
        }
        mean /= nf;
        // second pass: correction term and centered sum of squares
        let mut corr = Array1::<f64>::zeros(p);
        let mut ss = Array1::<f64>::zeros(p);
        for row in data.rows() {
            Zip::from(&mut corr)
                .and(&mut ss)
                .and(&mean)
                .and(row)
                .for_each(|c, s, &m, &x| {
                    let dx = x as f64 - m;
                    *c += dx;
                    *s += dx * dx;
                });
        }
        let mut std = Array1::<f64>::zeros(p);
        Zip::from(&mut mean)
            .and(&mut std)
            .and(&corr)
            .and(&ss)
            .for_each(|m, s, &c, &q| {
                *m += c / nf;
                let var = (q - c * c / nf) / nf;
                *s = var.max(0.0).sqrt().max(epsilon);
            });
        Ok(Standardizer { mean, std, epsilon })
    }

    pub fn apply(&self, data: ArrayView2<'_, f32>) -> Result<Array2<f64>, PreprocessError> {
        let p = self.n_features();
        if data.ncols() != p {
            return Err(PreprocessError::DimensionMismatch {
                expected: p,
                actual: data.ncols(),
            });
        }
        let mut out = Array2::<f64>::zeros(data.dim());
        Zip::from(out.axis_iter_mut(Axis(0)))
            .and(data.axis_iter(Axis(0)))
            .par_for_each(|mut o, x| {
                Zip::from(&mut o)
                    .and(&x)
                    .and(&self.mean)
                    .and(&self.std)
                    .for_each(|o, &x, &m, &s| *o = (x as f64 - m) / s);
            });
        Ok(out)
    }
}

pub fn fit_standardizer(
    train: &ActivationSet,
    epsilon: f64,
) -> Result<Standardizer, PreprocessError> {
    Standardizer::fit(train.data.view(), epsilon)
}

pub fn apply_standardizer(
    s: &Standardizer,
    set: &ActivationSet,
) -> Result<Array2<f64>, PreprocessError> {
    s.apply(set.data.view())
}
