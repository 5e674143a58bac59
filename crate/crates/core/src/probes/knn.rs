use std::cmp::Ordering;
use std::collections::BinaryHeap;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;

use super::{check_finite, check_labels, check_width, ProbeError};
use crate::activation_io::Label;

pub const DEFAULT_K: usize = 10;

/// Exact k-nearest-neighbour classifier over stored training points.
#[derive(Debug, Clone)]
pub struct KnnModel {
    pub k: usize,
    pub n_classes: usize,
    pub train_points: Array2<f64>,
    pub train_labels: Vec<Label>,
}

pub fn fit_knn(
    x: ArrayView2<'_, f64>,
    y: &[Label],
    n_classes: usize,
    k: usize,
) -> Result<KnnModel, ProbeError> {
    let n = x.nrows();
    if k == 0 || k > n {
        return Err(ProbeError::BadK { k, n });
    }
    check_labels(n, y, n_classes)?;
    check_finite(x)?;
    Ok(KnnModel {
        k,
        n_classes,
        train_points: x.as_standard_layout().into_owned(),
        train_labels: y.to_vec(),
    })
}

/// Candidate neighbour ordered by (distance, training row).
#[derive(Clone, Copy, PartialEq)]
struct Neighbor {
    dist: f64,
    row: usize,
}

impl Eq for Neighbor {}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist
            .total_cmp(&other.dist)
            .then(self.row.cmp(&other.row))
    }
}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (a4, a_rest) = a.split_at(a.len() / 4 * 4);
    let (b4, b_rest) = b.split_at(a4.len());
    for (x, y) in a4.chunks_exact(4).zip(b4.chunks_exact(4)) {
        for l in 0..4 {
            let t = x[l] - y[l];
            acc[l] += t * t;
        }
    }
    let mut sum = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in a_rest.iter().zip(b_rest) {
        sum += (x - y) * (x - y);
    }
    sum
}

fn classify(model: &KnnModel, q: ArrayView1<'_, f64>) -> Label {
    let k = model.k;
    let q: Vec<f64> = q.iter().copied().collect();
    let p = q.len();
    let points = model.train_points.as_standard_layout();
    let train = points.as_slice().expect("standard layout is contiguous");
    // max-heap holding the k smallest (dist, row) pairs seen so far
    let mut heap: BinaryHeap<Neighbor> = BinaryHeap::with_capacity(k + 1);
    for i in 0..model.train_labels.len() {
        let row = &train[i * p..(i + 1) * p];
        let cand = Neighbor {
            dist: squared_distance(&q, row),
            row: i,
        };
        if heap.len() < k {
            heap.push(cand);
        } else if cand < *heap.peek().expect("heap is full") {
            heap.pop();
            heap.push(cand);
        }
    }
    let mut votes = vec![0usize; model.n_classes];
    for nb in heap {
        votes[model.train_labels[nb.row] as usize] += 1;
    }
    argmax_first(&votes) as Label
}

/// Index of the largest count; the lowest index wins ties.
fn argmax_first(votes: &[usize]) -> usize {
    let mut best = 0;
    for (c, &v) in votes.iter().enumerate() {
        if v > votes[best] {
            best = c;
        }
    }
    best
}

/// Majority vote among the k Euclidean-nearest training points. Ties at the
/// k-th distance go to the lower training row; tied votes go to the lower
/// class index.
pub fn predict_knn(
    model: &KnnModel,
    queries: ArrayView2<'_, f64>,
) -> Result<Vec<Label>, ProbeError> {
    check_width(model.train_points.ncols(), queries)?;
    check_finite(queries)?;
    Ok(queries
        .axis_iter(Axis(0))
        .into_par_iter()
        .map(|q| classify(model, q))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn k_equal_n_gives_majority() {
        let x = array![[0.0], [1.0], [2.0], [3.0], [4.0]];
        let y = [2, 0, 2, 1, 0];
        let m = fit_knn(x.view(), &y, 3, 5).unwrap();
        let q = array![[-100.0], [2.5], [100.0]];
        // 0 and 2 tie at two votes each; lower class wins
        assert_eq!(predict_knn(&m, q.view()).unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn one_nn_returns_own_label() {
        let x = array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let y = [0, 1, 2];
        let m = fit_knn(x.view(), &y, 3, 1).unwrap();
        assert_eq!(predict_knn(&m, x.view()).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn two_class_tie_goes_to_lower_class() {
        let x = array![[-1.0], [1.0]];
        let y = [1, 0];
        let m = fit_knn(x.view(), &y, 2, 2).unwrap();
        assert_eq!(predict_knn(&m, array![[0.0]].view()).unwrap(), vec![0]);
    }

    #[test]
    fn boundary_distance_tie_goes_to_lower_row() {
        // rows 1 and 2 are both at distance 1; k = 2 keeps row 0 and row 1
        let x = array![[0.0], [1.0], [-1.0]];
        let y = [0, 1, 0];
        let m = fit_knn(x.view(), &y, 2, 2).unwrap();
        // votes: class 0 (row 0) and class 1 (row 1) -> tie -> class 0
        assert_eq!(predict_knn(&m, array![[0.0]].view()).unwrap(), vec![0]);
        let y = [1, 1, 0];
        let m = fit_knn(x.view(), &y, 2, 2).unwrap();
        assert_eq!(predict_knn(&m, array![[0.0]].view()).unwrap(), vec![1]);
    }

    #[test]
    fn errors() {
        let x = array![[0.0], [1.0]];
        assert_eq!(
            fit_knn(x.view(), &[0, 1], 2, 3).unwrap_err(),
            ProbeError::BadK { k: 3, n: 2 }
        );
        assert!(fit_knn(x.view(), &[0, 1], 2, 0).is_err());
        let m = fit_knn(x.view(), &[0, 1], 2, 1).unwrap();
        assert!(matches!(
            predict_knn(&m, array![[0.0, 1.0]].view()),
            Err(ProbeError::WidthMismatch { .. })
        ));
    }
}
