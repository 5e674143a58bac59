//! Surrogate classifiers trained on projected activations.

mod knn;
mod ncc;
mod svm;

use std::fmt;
use std::str::FromStr;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::activation_io::Label;

pub use knn::{fit_knn, predict_knn, KnnModel, DEFAULT_K};
pub use ncc::{fit_ncc, predict_ncc, NccModel};
pub use svm::{
    fit_linear_svm, predict_svm, train_binary, BinaryFit, Convergence, LinearSvmModel, SvmParams,
};

#[derive(Debug, Error, PartialEq)]
pub enum ProbeError {
    #[error("k = {k} must be in [1, n = {n}]")]
    BadK { k: usize, n: usize },
    #[error("width mismatch: model expects {expected} features, queries have {actual}")]
    WidthMismatch { expected: usize, actual: usize },
    #[error("{labels} labels for {rows} rows")]
    LabelCount { labels: usize, rows: usize },
    #[error("label {label} >= n_classes {n_classes}")]
    LabelOutOfRange { label: Label, n_classes: usize },
    #[error("class {0} has no training rows")]
    EmptyClass(usize),
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error(
        "degenerate binary problem for class {class}: {positives} positives, {negatives} negatives"
    )]
    DegenerateBinary {
        class: usize,
        positives: usize,
        negatives: usize,
    },
    #[error("non-finite input")]
    NonFinite,
    #[error("invalid parameter: {0}")]
    BadParam(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("svm did not converge for class {class} after {epochs} epochs (relative duality gap {gap:.3e})")]
    NonConvergence {
        class: usize,
        epochs: usize,
        gap: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Knn,
    Ncc,
    Svm,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Knn, ModelKind::Ncc, ModelKind::Svm];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Knn => "knn",
            ModelKind::Ncc => "ncc",
            ModelKind::Svm => "svm",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "knn" => Ok(ModelKind::Knn),
            "ncc" => Ok(ModelKind::Ncc),
            "svm" => Ok(ModelKind::Svm),
            other => Err(format!(
                "unknown model {other:?} (expected knn, ncc or svm)"
            )),
        }
    }
}

/// A fitted probe of any kind.
#[derive(Debug, Clone)]
pub enum ProbeModel {
    Knn(KnnModel),
    Ncc(NccModel),
    Svm(LinearSvmModel),
}

impl ProbeModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            ProbeModel::Knn(_) => ModelKind::Knn,
            ProbeModel::Ncc(_) => ModelKind::Ncc,
            ProbeModel::Svm(_) => ModelKind::Svm,
        }
    }

    pub fn predict(&self, queries: ArrayView2<'_, f64>) -> Result<Vec<Label>, ProbeError> {
        match self {
            ProbeModel::Knn(m) => predict_knn(m, queries),
            ProbeModel::Ncc(m) => predict_ncc(m, queries),
            ProbeModel::Svm(m) => predict_svm(m, queries),
        }
    }
}

/// Fraction of positions where `pred` and `truth` agree.
pub fn evaluate_accuracy(pred: &[Label], truth: &[Label]) -> Result<f64, ProbeError> {
    if pred.len() != truth.len() {
        return Err(ProbeError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

pub(crate) fn check_labels(
    rows: usize,
    labels: &[Label],
    n_classes: usize,
) -> Result<(), ProbeError> {
    if n_classes < 2 {
        return Err(ProbeError::TooFewClasses(n_classes));
    }
    if labels.len() != rows {
        return Err(ProbeError::LabelCount {
            labels: labels.len(),
            rows,
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l as usize >= n_classes) {
        return Err(ProbeError::LabelOutOfRange { label, n_classes });
    }
    Ok(())
}

pub(crate) fn check_finite(x: ArrayView2<'_, f64>) -> Result<(), ProbeError> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ProbeError::NonFinite)
    }
}

pub(crate) fn check_width(expected: usize, q: ArrayView2<'_, f64>) -> Result<(), ProbeError> {
    if q.ncols() != expected {
        return Err(ProbeError::WidthMismatch {
            expected,
            actual: q.ncols(),
        });
    }
    Ok(())
}
