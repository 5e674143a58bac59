//! One-vs-rest soft-margin linear SVM trained by dual coordinate descent.
//!
//! Each binary problem minimizes
//!
//! ```text
//! ½ (‖w‖² + b²) + C Σ_i max(0, 1 − s_i (w·x_i + b))
//! ```
//!
//! The bias enters as an extra constant feature, so its dual is the box
//! `0 ≤ α_i ≤ C` with no equality constraint and every coordinate step is an
//! exact one-dimensional maximization. The dual objective therefore never
//! decreases, and the primal–dual gap gives a convergence certificate.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_finite, check_labels, check_width, ProbeError};
use crate::activation_io::Label;
use crate::seeds::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvmParams {
    pub c: f64,
    /// Stop once the duality gap is at most `tol` times the primal objective.
    pub tol: f64,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for SvmParams {
    fn default() -> Self {
        SvmParams {
            c: 1.0,
            tol: 1e-4,
            max_epochs: 1000,
            seed: 0,
        }
    }
}

impl SvmParams {
    fn validate(&self) -> Result<(), ProbeError> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(ProbeError::BadParam(format!(
                "c must be positive, got {}",
                self.c
            )));
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(ProbeError::BadParam(format!(
                "tol must be positive, got {}",
                self.tol
            )));
        }
        if self.max_epochs == 0 {
            return Err(ProbeError::BadParam("max_epochs must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub converged: bool,
    pub epochs: usize,
    /// `(primal − dual) / primal` after the last epoch.
    pub relative_gap: f64,
}

/// Result of one binary problem.
#[derive(Debug, Clone)]
pub struct BinaryFit {
    pub weights: Array1<f64>,
    pub bias: f64,
    pub alpha: Vec<f64>,
    pub primal: f64,
    pub dual: f64,
    pub convergence: Convergence,
    /// Dual objective at the end of every epoch; nondecreasing.
    pub dual_history: Vec<f64>,
}

fn primal_dual(
    x: ArrayView2<'_, f64>,
    signs: &[f64],
    alpha: &[f64],
    w: &Array1<f64>,
    b: f64,
    c: f64,
) -> (f64, f64) {
    let reg = 0.5 * (w.dot(w) + b * b);
    let hinge: f64 = x
        .rows()
        .into_iter()
        .zip(signs)
        .map(|(row, &s)| (1.0 - s * (row.dot(w) + b)).max(0.0))
        .sum();
    let alpha_sum: f64 = alpha.iter().sum();
    (reg + c * hinge, alpha_sum - reg)
}

/// Active-set sweeps after each full epoch are capped at this many passes,
/// and at `ACTIVE_WORK` full passes' worth of coordinate steps.
const ACTIVE_PASSES: usize = 1000;
const ACTIVE_WORK: usize = 10;

struct CdState<'a, 'b> {
    x: ArrayView2<'a, f64>,
    signs: &'a [f64],
    diag: &'a [f64],
    c: f64,
    alpha: &'b mut [f64],
    w: &'b mut Array1<f64>,
    b: &'b mut f64,
}

impl CdState<'_, '_> {
    /// One exact coordinate step per index in `order`. Returns the largest
    /// absolute projected gradient seen.
    fn pass(&mut self, order: &[usize]) -> f64 {
        let mut worst: f64 = 0.0;
        for &i in order {
            let row: ArrayView1<'_, f64> = self.x.row(i);
            let s = self.signs[i];
            let grad = s * (row.dot(&*self.w) + *self.b) - 1.0;
            let a = self.alpha[i];
            let projected = if a <= 0.0 {
                grad.min(0.0)
            } else if a >= self.c {
                grad.max(0.0)
            } else {
                grad
            };
            worst = worst.max(projected.abs());
            if projected == 0.0 {
                continue;
            }
            let next = (a - grad / self.diag[i]).clamp(0.0, self.c);
            let step = (next - a) * s;
            if step != 0.0 {
                self.alpha[i] = next;
                self.w.scaled_add(step, &row);
                *self.b += step;
            }
        }
        worst
    }
}

/// Trains one binary problem with labels `signs[i] ∈ {−1, +1}`.
pub fn train_binary(
    x: ArrayView2<'_, f64>,
    signs: &[f64],
    params: &SvmParams,
) -> Result<BinaryFit, ProbeError> {
    params.validate()?;
    let (n, d) = x.dim();
    if signs.len() != n {
        return Err(ProbeError::LabelCount {
            labels: signs.len(),
            rows: n,
        });
    }
    check_finite(x)?;
    let c = params.c;
    let diag: Vec<f64> = x.rows().into_iter().map(|r| r.dot(&r) + 1.0).collect();
    let mut alpha = vec![0.0; n];
    let mut w = Array1::<f64>::zeros(d);
    let mut b = 0.0;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut history = Vec::new();
    let mut convergence = Convergence {
        converged: false,
        epochs: 0,
        relative_gap: f64::INFINITY,
    };
    let (mut primal, mut dual) = (f64::INFINITY, 0.0);

    let mut active: Vec<usize> = Vec::new();
    for epoch in 1..=params.max_epochs {
        order.shuffle(&mut rng);
        let mut state = CdState {
            x,
            signs,
            diag: &diag,
            c,
            alpha: &mut alpha,
            w: &mut w,
            b: &mut b,
        };
        state.pass(&order);
        // extra sweeps restricted to the nonzero multipliers; they are cheap
        // when the support set is small and speed up the tail of convergence
        active.clear();
        active.extend((0..n).filter(|&i| state.alpha[i] > 0.0));
        let budget = (ACTIVE_WORK * n / active.len().max(1)).clamp(1, ACTIVE_PASSES);
        for _ in 0..budget {
            active.shuffle(&mut rng);
            if state.pass(&active) < 1e-12 {
                break;
            }
        }
        (primal, dual) = primal_dual(x, signs, &alpha, &w, b, c);
        history.push(dual);
        let gap = ((primal - dual) / primal).max(0.0);
        convergence = Convergence {
            converged: gap <= params.tol,
            epochs: epoch,
            relative_gap: gap,
        };
        if convergence.converged {
            break;
        }
    }

    Ok(BinaryFit {
        weights: w,
        bias: b,
        alpha,
        primal,
        dual,
        convergence,
        dual_history: history,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearSvmModel {
    /// `C x d`.
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
    pub c_param: f64,
    /// Primal objective of each one-vs-rest problem at the returned weights.
    pub objectives: Vec<f64>,
    pub convergence: Vec<Convergence>,
}

impl LinearSvmModel {
    /// The first class whose problem stopped on `max_epochs`, as an error.
    pub fn non_convergence(&self) -> Option<ProbeError> {
        self.convergence
            .iter()
            .enumerate()
            .find(|(_, c)| !c.converged)
            .map(|(class, c)| ProbeError::NonConvergence {
                class,
                epochs: c.epochs,
                gap: c.relative_gap,
            })
    }

    pub fn scores(&self, queries: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut scores = queries.dot(&self.weights.t());
        scores += &self.biases;
        scores
    }
}

/// Trains one binary problem per class. Problems run in parallel; each uses
/// its own seed derived from `params.seed` and the class index.
pub fn fit_linear_svm(
    x: ArrayView2<'_, f64>,
    y: &[Label],
    n_classes: usize,
    params: &SvmParams,
) -> Result<LinearSvmModel, ProbeError> {
    params.validate()?;
    check_labels(x.nrows(), y, n_classes)?;
    check_finite(x)?;
    let fits: Vec<BinaryFit> = (0..n_classes)
        .into_par_iter()
        .map(|class| {
            let signs: Vec<f64> = y
                .iter()
                .map(|&l| if l as usize == class { 1.0 } else { -1.0 })
                .collect();
            let positives = signs.iter().filter(|&&s| s > 0.0).count();
            let negatives = signs.len() - positives;
            if positives == 0 || negatives == 0 {
                return Err(ProbeError::DegenerateBinary {
                    class,
                    positives,
                    negatives,
                });
            }
            let class_params = SvmParams {
                seed: derive_seed(params.seed, &[class as u64]),
                ..*params
            };
            train_binary(x, &signs, &class_params)
        })
        .collect::<Result<_, _>>()?;

    let d = x.ncols();
    let mut weights = Array2::zeros((n_classes, d));
    let mut biases = Array1::zeros(n_classes);
    for (c, fit) in fits.iter().enumerate() {
        weights.row_mut(c).assign(&fit.weights);
        biases[c] = fit.bias;
    }
    Ok(LinearSvmModel {
        weights,
        biases,
        c_param: params.c,
        objectives: fits.iter().map(|f| f.primal).collect(),
        convergence: fits.iter().map(|f| f.convergence).collect(),
    })
}

/// Argmax of the per-class affine scores; lower class index on ties.
pub fn predict_svm(
    model: &LinearSvmModel,
    queries: ArrayView2<'_, f64>,
) -> Result<Vec<Label>, ProbeError> {
    check_width(model.weights.ncols(), queries)?;
    check_finite(queries)?;
    let scores = model.scores(queries);
    Ok(scores
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best as Label
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn symmetric_pair_splits_at_zero() {
        let x = array![[-1.0], [1.0]];
        let params = SvmParams {
            c: 10.0,
            ..Default::default()
        };
        let m = fit_linear_svm(x.view(), &[0, 1], 2, &params).unwrap();
        // class 1 score: w x + b, boundary at -b / w
        let boundary = -m.biases[1] / m.weights[[1, 0]];
        assert!(boundary.abs() < 1e-3, "boundary {boundary}");
        assert_eq!(predict_svm(&m, x.view()).unwrap(), vec![0, 1]);
        assert!(m.non_convergence().is_none());
    }

    #[test]
    fn single_class_is_degenerate() {
        let x = array![[0.0], [1.0], [2.0]];
        let err = fit_linear_svm(x.view(), &[1, 1, 1], 2, &SvmParams::default()).unwrap_err();
        assert!(
            err.to_string().contains("degenerate binary problem"),
            "{err}"
        );
    }

    #[test]
    fn non_finite_rejected() {
        let x = array![[0.0], [f64::INFINITY]];
        assert_eq!(
            fit_linear_svm(x.view(), &[0, 1], 2, &SvmParams::default()).unwrap_err(),
            ProbeError::NonFinite
        );
    }

    #[test]
    fn one_hot_weights_pick_their_class() {
        let m = LinearSvmModel {
            weights: Array2::eye(3),
            biases: Array1::zeros(3),
            c_param: 1.0,
            objectives: vec![0.0; 3],
            convergence: vec![],
        };
        let q = Array2::<f64>::eye(3);
        assert_eq!(predict_svm(&m, q.view()).unwrap(), vec![0, 1, 2]);
        let mut shifted = m.clone();
        shifted.biases += 5.0;
        assert_eq!(predict_svm(&shifted, q.view()).unwrap(), vec![0, 1, 2]);
        // all-zero query: every score ties, lowest class wins
        assert_eq!(
            predict_svm(&m, array![[0.0, 0.0, 0.0]].view()).unwrap(),
            vec![0]
        );
    }

    #[test]
    fn epoch_cap_is_reported() {
        let x = array![
            [0.0, 1.0],
            [1.0, 0.0],
            [0.2, 0.9],
            [0.8, 0.1],
            [0.5, 0.5],
            [0.4, 0.6]
        ];
        let params = SvmParams {
            c: 100.0,
            tol: 1e-12,
            max_epochs: 1,
            seed: 1,
        };
        let m = fit_linear_svm(x.view(), &[0, 1, 0, 1, 0, 1], 2, &params).unwrap();
        let err = m.non_convergence().unwrap();
        assert!(matches!(err, ProbeError::NonConvergence { epochs: 1, .. }));
    }
}
