//! Reference implementations used as oracles by the integration tests. Each
//! one takes a different route from the library code it checks.

#![allow(dead_code)]

use ndarray::{Array1, Array2, ArrayView2};
use probekit::Label;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut impl Rng, n: usize, p: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, p), |_| rng.sample::<f64, _>(StandardNormal))
}

pub fn center_columns(x: &Array2<f64>) -> Array2<f64> {
    let mean = x.mean_axis(ndarray::Axis(0)).unwrap();
    x - &mean
}

/// Haar-random orthogonal matrix via Gram-Schmidt on a Gaussian matrix.
pub fn random_rotation(rng: &mut impl Rng, d: usize) -> Array2<f64> {
    let g = gaussian(rng, d, d);
    let mut q = Array2::<f64>::zeros((d, d));
    for j in 0..d {
        let mut v = g.column(j).to_owned();
        for _ in 0..2 {
            for i in 0..j {
                let c = q.column(i).to_owned();
                let proj = v.dot(&c);
                v.scaled_add(-proj, &c);
            }
        }
        let n = v.dot(&v).sqrt();
        q.column_mut(j).assign(&(v / n));
    }
    q
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// eigenvalues in descending order and eigenvectors as matching columns.
pub fn jacobi_eigen(a: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = a.nrows();
    let mut a = a.clone();
    let mut v = Array2::<f64>::eye(n);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[[i, j]] * a[[i, j]])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[[p, q]].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * a[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[[j, j]].total_cmp(&a[[i, i]]));
    let values = order.iter().map(|&i| a[[i, i]]).collect();
    let mut vectors = Array2::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        vectors.column_mut(dst).assign(&v.column(src));
    }
    (values, vectors)
}

/// PCA via eigendecomposition of `XᵀX / n`: (eigenvalues desc, components as
/// rows).
pub fn covariance_pca(x: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = x.nrows() as f64;
    let cov = x.t().dot(x) / n;
    let (vals, vecs) = jacobi_eigen(&cov);
    (vals, vecs.t().to_owned())
}

/// Column mean and population std with two plain passes.
pub fn two_pass_stats(x: &Array2<f32>) -> (Vec<f64>, Vec<f64>) {
    let (n, p) = x.dim();
    let mut means = vec![0.0; p];
    let mut stds = vec![0.0; p];
    for j in 0..p {
        let col: Vec<f64> = x.column(j).iter().map(|&v| v as f64).collect();
        let m = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
        means[j] = m;
        stds[j] = var.sqrt();
    }
    (means, stds)
}

fn vote(labels: impl Iterator<Item = Label>, n_classes: usize) -> Label {
    let mut counts = vec![0usize; n_classes];
    for l in labels {
        counts[l as usize] += 1;
    }
    let max = *counts.iter().max().unwrap();
    counts.iter().position(|&c| c == max).unwrap() as Label
}

/// k-NN by fully sorting all training points on (distance, row).
pub fn knn_oracle(
    train: ArrayView2<'_, f64>,
    labels: &[Label],
    n_classes: usize,
    k: usize,
    queries: ArrayView2<'_, f64>,
) -> Vec<Label> {
    queries
        .rows()
        .into_iter()
        .map(|q| {
            let mut d: Vec<(f64, usize)> = train
                .rows()
                .into_iter()
                .enumerate()
                .map(|(i, r)| {
                    let diff = &r - &q;
                    (diff.dot(&diff), i)
                })
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            vote(d.iter().take(k).map(|&(_, i)| labels[i]), n_classes)
        })
        .collect()
}

pub fn group_means(x: ArrayView2<'_, f64>, labels: &[Label], n_classes: usize) -> Array2<f64> {
    let mut out = Array2::zeros((n_classes, x.ncols()));
    for c in 0..n_classes {
        let rows: Vec<usize> = (0..x.nrows())
            .filter(|&i| labels[i] as usize == c)
            .collect();
        for j in 0..x.ncols() {
            out[[c, j]] = rows.iter().map(|&i| x[[i, j]]).sum::<f64>() / rows.len() as f64;
        }
    }
    out
}

pub fn ncc_oracle(
    train: ArrayView2<'_, f64>,
    labels: &[Label],
    n_classes: usize,
    queries: ArrayView2<'_, f64>,
) -> Vec<Label> {
    let means = group_means(train, labels, n_classes);
    queries
        .rows()
        .into_iter()
        .map(|q| {
            let dists: Vec<f64> = means
                .rows()
                .into_iter()
                .map(|m| {
                    let diff = &m - &q;
                    diff.dot(&diff)
                })
                .collect();
            let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
            dists.iter().position(|&d| d == min).unwrap() as Label
        })
        .collect()
}

/// Primal objective `½(‖w‖² + b²) + C Σ hinge`.
pub fn svm_primal(x: ArrayView2<'_, f64>, signs: &[f64], w: &Array1<f64>, b: f64, c: f64) -> f64 {
    let hinge: f64 = x
        .rows()
        .into_iter()
        .zip(signs)
        .map(|(r, &s)| (1.0 - s * (r.dot(w) + b)).max(0.0))
        .sum();
    0.5 * (w.dot(w) + b * b) + c * hinge
}

pub struct DualSolution {
    pub primal: f64,
    pub dual: f64,
    pub w: Array1<f64>,
    pub b: f64,
}

/// Box-constrained SVM dual solved by accelerated projected gradient with
/// adaptive restart, using the dense kernel matrix of the bias-augmented
/// points.
pub fn svm_dual_qp(x: ArrayView2<'_, f64>, signs: &[f64], c: f64, rel_gap: f64) -> DualSolution {
    let n = x.nrows();
    let s = Array1::from(signs.to_vec());
    let mut q = x.dot(&x.t());
    q += 1.0;
    for i in 0..n {
        for j in 0..n {
            q[[i, j]] *= s[i] * s[j];
        }
    }
    let (eig, _) = jacobi_eigen(&q);
    let lip = eig[0].max(1e-12);
    let project = |a: &Array1<f64>| a.mapv(|v| v.clamp(0.0, c));
    let dual = |a: &Array1<f64>| a.sum() - 0.5 * a.dot(&q.dot(a));
    let recover = |a: &Array1<f64>| {
        let coef = a * &s;
        (x.t().dot(&coef), coef.sum())
    };

    let mut alpha = Array1::<f64>::zeros(n);
    let mut y = alpha.clone();
    let mut t = 1.0f64;
    let mut best = None;
    for it in 0..2_000_000 {
        let grad = 1.0 - q.dot(&y);
        let next = project(&(&y + &(grad / lip)));
        // restart momentum when the objective would go down
        if dual(&next) < dual(&alpha) {
            t = 1.0;
            y = alpha.clone();
            continue;
        }
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        y = &next + &((&next - &alpha) * ((t - 1.0) / t_next));
        alpha = next;
        t = t_next;
        if it % 50 == 0 {
            let (w, b) = recover(&alpha);
            let p = svm_primal(x, signs, &w, b, c);
            let d = dual(&alpha);
            if (p - d) / p <= rel_gap {
                best = Some(DualSolution {
                    primal: p,
                    dual: d,
                    w,
                    b,
                });
                break;
            }
        }
    }
    best.unwrap_or_else(|| {
        let (w, b) = recover(&alpha);
        DualSolution {
            primal: svm_primal(x, signs, &w, b, c),
            dual: dual(&alpha),
            w,
            b,
        }
    })
}

/// Accuracy by counting.
pub fn accuracy_oracle(a: &[Label], b: &[Label]) -> f64 {
    let mut hits = 0;
    for i in 0..a.len() {
        if a[i] == b[i] {
            hits += 1;
        }
    }
    hits as f64 / a.len() as f64
}

pub fn random_labels(rng: &mut impl Rng, n: usize, n_classes: usize) -> Vec<Label> {
    // every class present at least once
    let mut labels: Vec<Label> = (0..n).map(|i| (i % n_classes) as Label).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        labels.swap(i, j);
    }
    labels
}
