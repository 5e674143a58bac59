//! Neural-collapse statistics and the multi-probe collapse-layer detector.
//!
//! The within/between statistic is the trace ratio `tr(Σ_W) / tr(Σ_B)`,
//! computed from sums of squared deviations so no `p x p` matrix is formed.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array1, Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::activation_io::Label;
use crate::probes::ModelKind;
use crate::sweep::{AccuracyCurve, SweepReport};

pub const DEFAULT_D_SMALL: usize = 10;
pub const DEFAULT_EPSILON: f64 = 0.02;

#[derive(Debug, Error, PartialEq)]
pub enum CollapseError {
    #[error("degenerate between-class scatter: all class means coincide")]
    DegenerateBetween,
    #[error("need at least 2 populated classes, got {0}")]
    TooFewClasses(usize),
    #[error("{labels} labels for {rows} rows")]
    LabelCount { labels: usize, rows: usize },
    #[error("label {label} >= n_classes {n_classes}")]
    LabelOutOfRange { label: Label, n_classes: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("missing {model} curve for layer {layer}")]
    MissingCurve { layer: usize, model: ModelKind },
    #[error("{model} curve for layer {layer} has no point with d <= {d_small}")]
    NoSmallD {
        layer: usize,
        model: ModelKind,
        d_small: usize,
    },
    #[error("invalid parameter: {0}")]
    BadParam(String),
}

/// `tr(Σ_W) / tr(Σ_B)` with both scatters averaged over samples (the
/// between-class term weights each class by its size).
pub fn nc1_ratio(
    x: ArrayView2<'_, f64>,
    y: &[Label],
    n_classes: usize,
) -> Result<f64, CollapseError> {
    let (n, p) = x.dim();
    if y.len() != n {
        return Err(CollapseError::LabelCount {
            labels: y.len(),
            rows: n,
        });
    }
    let mut sums = Array2::<f64>::zeros((n_classes, p));
    let mut counts = vec![0usize; n_classes];
    for (row, &label) in x.rows().into_iter().zip(y) {
        let c = label as usize;
        if c >= n_classes {
            return Err(CollapseError::LabelOutOfRange { label, n_classes });
        }
        counts[c] += 1;
        Zip::from(sums.row_mut(c))
            .and(row)
            .for_each(|s, &v| *s += v);
    }
    let populated = counts.iter().filter(|&&c| c > 0).count();
    if populated < 2 {
        return Err(CollapseError::TooFewClasses(populated));
    }
    let mut global = Array1::<f64>::zeros(p);
    for (mut row, &count) in sums.rows_mut().into_iter().zip(&counts) {
        global += &row;
        if count > 0 {
            row /= count as f64;
        }
    }
    global /= n as f64;
    let means = sums;

    let within: f64 = x
        .rows()
        .into_iter()
        .zip(y)
        .map(|(row, &label)| {
            row.iter()
                .zip(means.row(label as usize))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum::<f64>()
        / n as f64;
    let between: f64 = means
        .rows()
        .into_iter()
        .zip(&counts)
        .filter(|(_, &c)| c > 0)
        .map(|(m, &c)| {
            c as f64
                * m.iter()
                    .zip(global.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
        })
        .sum::<f64>()
        / n as f64;
    if between <= f64::EPSILON * (within + between) || between == 0.0 {
        return Err(CollapseError::DegenerateBetween);
    }
    Ok(within / between)
}

/// Fraction of samples where the NCC probe agrees with the network.
pub fn nc4_agreement(ncc_pred: &[Label], network_pred: &[Label]) -> Result<f64, CollapseError> {
    if ncc_pred.len() != network_pred.len() {
        return Err(CollapseError::LengthMismatch(
            ncc_pred.len(),
            network_pred.len(),
        ));
    }
    if ncc_pred.is_empty() {
        return Ok(0.0);
    }
    let agree = ncc_pred
        .iter()
        .zip(network_pred)
        .filter(|(a, b)| a == b)
        .count();
    Ok(agree as f64 / ncc_pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollapseParams {
    pub d_small: usize,
    pub epsilon: f64,
    pub reference_accuracy: f64,
}

impl CollapseParams {
    pub fn new(reference_accuracy: f64) -> Self {
        CollapseParams {
            d_small: DEFAULT_D_SMALL,
            epsilon: DEFAULT_EPSILON,
            reference_accuracy,
        }
    }

    fn validate(&self) -> Result<(), CollapseError> {
        if self.d_small == 0 {
            return Err(CollapseError::BadParam("d_small must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(CollapseError::BadParam(format!(
                "epsilon must be in [0, 1), got {}",
                self.epsilon
            )));
        }
        if !(0.0..=1.0).contains(&self.reference_accuracy) {
            return Err(CollapseError::BadParam(format!(
                "reference_accuracy must be in [0, 1], got {}",
                self.reference_accuracy
            )));
        }
        Ok(())
    }

    pub fn target(&self) -> f64 {
        (1.0 - self.epsilon) * self.reference_accuracy
    }
}

/// Adjacent pair of taps between which collapse sets in. `before == -1`
/// means every tap from the first one on is collapsed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollapseBoundary {
    pub before: i64,
    pub after: usize,
}

impl fmt::Display for CollapseBoundary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.before < 0 {
            write!(f, "collapsed from first tap")
        } else {
            write!(f, "between taps {} and {}", self.before, self.after)
        }
    }
}

/// Best accuracy over grid points with `d <= d_small`.
fn small_d_accuracy(curve: &AccuracyCurve, d_small: usize) -> Option<f64> {
    curve
        .points
        .iter()
        .filter(|p| p.d <= d_small)
        .map(|p| p.accuracy)
        .reduce(f64::max)
}

/// Per-layer best small-d accuracy for every probe kind, in network order.
fn small_d_table(
    curves: &[AccuracyCurve],
    n_layers: usize,
    d_small: usize,
) -> Result<Vec<BTreeMap<ModelKind, f64>>, CollapseError> {
    let mut table = vec![BTreeMap::new(); n_layers];
    for (layer, row) in table.iter_mut().enumerate() {
        for model in ModelKind::ALL {
            let curve = curves
                .iter()
                .find(|c| c.layer_index == layer && c.model == model)
                .ok_or(CollapseError::MissingCurve { layer, model })?;
            let acc = small_d_accuracy(curve, d_small).ok_or(CollapseError::NoSmallD {
                layer,
                model,
                d_small,
            })?;
            row.insert(model, acc);
        }
    }
    Ok(table)
}

/// Earliest layer `L` such that every probe reaches `(1 − ε)·reference`
/// within `d <= d_small` on `L` and on every later layer.
pub fn detect_collapse_layer(
    curves: &[AccuracyCurve],
    n_layers: usize,
    params: &CollapseParams,
) -> Result<Option<CollapseBoundary>, CollapseError> {
    params.validate()?;
    let table = small_d_table(curves, n_layers, params.d_small)?;
    Ok(boundary_from_table(&table, params.target()))
}

fn boundary_from_table(
    table: &[BTreeMap<ModelKind, f64>],
    target: f64,
) -> Option<CollapseBoundary> {
    let mut first = None;
    for (layer, accs) in table.iter().enumerate().rev() {
        if accs.values().all(|&a| a >= target) {
            first = Some(layer);
        } else {
            break;
        }
    }
    first.map(|after| CollapseBoundary {
        before: after as i64 - 1,
        after,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseLayer {
    pub layer_index: usize,
    pub layer_id: String,
    pub nc1_ratio: Option<f64>,
    pub nc4_agreement: Option<f64>,
    /// Best accuracy per probe over grid points with `d <= d_small`.
    pub small_d_accuracy: BTreeMap<ModelKind, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub params: CollapseParams,
    pub layers: Vec<CollapseLayer>,
    pub boundary: Option<CollapseBoundary>,
    /// Human-readable rendering of `boundary`.
    pub boundary_description: String,
}

pub fn build_collapse_report(
    report: &SweepReport,
    params: &CollapseParams,
) -> Result<CollapseReport, CollapseError> {
    params.validate()?;
    let n_layers = report.layers.len();
    let table = small_d_table(&report.curves, n_layers, params.d_small)?;
    let boundary = boundary_from_table(&table, params.target());
    let layers = report
        .layers
        .iter()
        .zip(table)
        .map(|(layer, accs)| CollapseLayer {
            layer_index: layer.index,
            layer_id: layer.layer_id.clone(),
            nc1_ratio: layer.nc1_ratio,
            nc4_agreement: layer.nc4_agreement,
            small_d_accuracy: accs,
        })
        .collect();
    Ok(CollapseReport {
        params: *params,
        layers,
        boundary,
        boundary_description: boundary
            .map(|b| b.to_string())
            .unwrap_or_else(|| "no collapse detected".into()),
    })
}
