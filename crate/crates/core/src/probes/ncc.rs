use ndarray::{Array2, ArrayView2, Axis, Zip};
use rayon::prelude::*;

use super::{check_finite, check_labels, check_width, ProbeError};
use crate::activation_io::Label;

/// Nearest class-center classifier.
#[derive(Debug, Clone)]
pub struct NccModel {
    /// `C x d`, row `c` is the mean of the training rows labelled `c`.
    pub centroids: Array2<f64>,
    pub class_ids: Vec<Label>,
}

pub fn fit_ncc(
    x: ArrayView2<'_, f64>,
    y: &[Label],
    n_classes: usize,
) -> Result<NccModel, ProbeError> {
    check_labels(x.nrows(), y, n_classes)?;
    check_finite(x)?;
    let d = x.ncols();
    let mut sums = Array2::<f64>::zeros((n_classes, d));
    let mut counts = vec![0usize; n_classes];
    for (row, &label) in x.rows().into_iter().zip(y) {
        let c = label as usize;
        counts[c] += 1;
        Zip::from(sums.row_mut(c))
            .and(row)
            .for_each(|s, &v| *s += v);
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(ProbeError::EmptyClass(c));
    }
    for (mut row, &n) in sums.rows_mut().into_iter().zip(&counts) {
        row /= n as f64;
    }
    Ok(NccModel {
        centroids: sums,
        class_ids: (0..n_classes).map(|c| c as Label).collect(),
    })
}

/// Euclidean argmin over centroids, lower class index on ties.
pub fn predict_ncc(
    model: &NccModel,
    queries: ArrayView2<'_, f64>,
) -> Result<Vec<Label>, ProbeError> {
    check_width(model.centroids.ncols(), queries)?;
    check_finite(queries)?;
    Ok(queries
        .axis_iter(Axis(0))
        .into_par_iter()
        .map(|q| {
            let mut best = 0;
            let mut best_dist = f64::INFINITY;
            for (c, centroid) in model.centroids.rows().into_iter().enumerate() {
                let dist: f64 = q
                    .iter()
                    .zip(centroid.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if dist < best_dist {
                    best = c;
                    best_dist = dist;
                }
            }
            model.class_ids[best]
        })
        .collect())
}
