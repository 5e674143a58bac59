//! Principal components of standardized activations.
//!
//! When `p <= n` the components come from a thin SVD of the data matrix. When
//! `p > n` the `n x n` Gram matrix `X Xᵀ` is eigendecomposed instead and the
//! right singular vectors are recovered as `Xᵀ u / σ`, which never forms a
//! `p x p` matrix.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, SymmetricEigen, SVD};
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::preprocess::Standardizer;

/// Default upper bound on the number of components fitted per layer.
pub const DEFAULT_K_MAX_CAP: usize = 4096;

pub const BLOB_MAGIC: &[u8; 8] = b"PROBEPC1";
pub const BLOB_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PcaError {
    #[error("k_max = {k_max} out of range [1, {limit}] (n = {n}, p = {p})")]
    KMaxOutOfRange {
        k_max: usize,
        limit: usize,
        n: usize,
        p: usize,
    },
    #[error("d = {d} out of range [1, {k_max}]")]
    DOutOfRange { d: usize, k_max: usize },
    #[error("width mismatch: model has {expected} features, input has {actual}")]
    WidthMismatch { expected: usize, actual: usize },
    #[error("non-finite input")]
    NonFinite,
    #[error("pca blob {path}: {message}")]
    Blob { path: PathBuf, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// Largest admissible component count for an `n x p` fit.
pub fn rank_limit(n: usize, p: usize) -> usize {
    n.saturating_sub(1).min(p)
}

/// `min(n - 1, p, cap)`.
pub fn default_k_max(n: usize, p: usize, cap: usize) -> usize {
    rank_limit(n, p).min(cap)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    /// `k_max x p`, orthonormal rows ordered by singular value.
    pub components: Array2<f64>,
    pub singular_values: Array1<f64>,
    pub explained_variance_ratio: Array1<f64>,
    /// Sum of all squared singular values of the fit matrix.
    pub total_variance: f64,
    pub n_fit: usize,
}

impl PcaModel {
    pub fn k_max(&self) -> usize {
        self.components.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.components.ncols()
    }

    fn check_d(&self, d: usize) -> Result<(), PcaError> {
        if d == 0 || d > self.k_max() {
            return Err(PcaError::DOutOfRange {
                d,
                k_max: self.k_max(),
            });
        }
        Ok(())
    }

    /// `X · components[..d]ᵀ`.
    pub fn project(&self, x: ArrayView2<'_, f64>, d: usize) -> Result<Array2<f64>, PcaError> {
        self.check_d(d)?;
        if x.ncols() != self.n_features() {
            return Err(PcaError::WidthMismatch {
                expected: self.n_features(),
                actual: x.ncols(),
            });
        }
        Ok(x.dot(&self.components.slice(s![..d, ..]).t()))
    }

    pub fn explained_variance_cumulative(&self, d: usize) -> Result<f64, PcaError> {
        self.check_d(d)?;
        Ok(self
            .explained_variance_ratio
            .iter()
            .take(d)
            .sum::<f64>()
            .clamp(0.0, 1.0))
    }
}

pub fn fit_pca(x: ArrayView2<'_, f64>, k_max: usize) -> Result<PcaModel, PcaError> {
    let (n, p) = x.dim();
    let limit = rank_limit(n, p);
    if k_max == 0 || k_max > limit {
        return Err(PcaError::KMaxOutOfRange { k_max, limit, n, p });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(PcaError::NonFinite);
    }
    let total_variance: f64 = x.iter().map(|v| v * v).sum();

    let (mut components, singular_values) = if p <= n {
        thin_svd(x, k_max)
    } else {
        gram_route(x, k_max)
    };
    fix_signs(&mut components);

    let explained_variance_ratio = if total_variance > 0.0 {
        singular_values.mapv(|s| s * s / total_variance)
    } else {
        Array1::zeros(k_max)
    };
    Ok(PcaModel {
        components,
        singular_values,
        explained_variance_ratio,
        total_variance,
        n_fit: n,
    })
}

fn to_dmatrix(x: ArrayView2<'_, f64>) -> DMatrix<f64> {
    let (n, p) = x.dim();
    DMatrix::from_fn(n, p, |i, j| x[[i, j]])
}

fn thin_svd(x: ArrayView2<'_, f64>, k_max: usize) -> (Array2<f64>, Array1<f64>) {
    let p = x.ncols();
    let svd = SVD::new(to_dmatrix(x), false, true);
    let v_t = svd.v_t.expect("v_t requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut components = Array2::zeros((k_max, p));
    let mut sv = Array1::zeros(k_max);
    for (row, &src) in order.iter().take(k_max).enumerate() {
        sv[row] = svd.singular_values[src];
        for j in 0..p {
            components[[row, j]] = v_t[(src, j)];
        }
    }
    (components, sv)
}

fn gram_route(x: ArrayView2<'_, f64>, k_max: usize) -> (Array2<f64>, Array1<f64>) {
    let (n, p) = x.dim();
    let gram = x.dot(&x.t());
    let eig = SymmetricEigen::new(DMatrix::from_fn(n, n, |i, j| gram[[i, j]]));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut components = Array2::zeros((k_max, p));
    let mut sv = Array1::zeros(k_max);
    for (row, &src) in order.iter().take(k_max).enumerate() {
        let sigma = eig.eigenvalues[src].max(0.0).sqrt();
        sv[row] = sigma;
        let u = Array1::from_iter((0..n).map(|i| eig.eigenvectors[(i, src)]));
        let v = x.t().dot(&u);
        components.row_mut(row).assign(&v);
    }
    orthonormalize_rows(&mut components);
    (components, sv)
}

/// Modified Gram-Schmidt over rows. Rows that vanish (rank-deficient input)
/// are replaced by the first coordinate axis that is not yet spanned.
fn orthonormalize_rows(m: &mut Array2<f64>) {
    let (k, p) = m.dim();
    let mut next_axis = 0;
    for i in 0..k {
        for _pass in 0..2 {
            for j in 0..i {
                let (done, mut rest) = m.view_mut().split_at(Axis(0), i);
                let mut row = rest.row_mut(0);
                let prev = done.row(j);
                let proj = row.dot(&prev);
                row.scaled_add(-proj, &prev);
            }
        }
        let norm = m.row(i).dot(&m.row(i)).sqrt();
        if norm > 1e-10 {
            m.row_mut(i).mapv_inplace(|v| v / norm);
            continue;
        }
        // fill with an unused axis
        while next_axis < p {
            let mut e = Array1::<f64>::zeros(p);
            e[next_axis] = 1.0;
            next_axis += 1;
            for j in 0..i {
                let prev = m.row(j).to_owned();
                let proj = e.dot(&prev);
                e.scaled_add(-proj, &prev);
            }
            let norm = e.dot(&e).sqrt();
            if norm > 1e-6 {
                m.row_mut(i).assign(&(e / norm));
                break;
            }
        }
    }
}

/// Flips each row so that its entry of largest magnitude is positive (first
/// such entry on ties).
fn fix_signs(components: &mut Array2<f64>) {
    for mut row in components.rows_mut() {
        let mut best = 0;
        for (j, v) in row.iter().enumerate() {
            if v.abs() > row[best].abs() {
                best = j;
            }
        }
        if row[best] < 0.0 {
            row.mapv_inplace(|v| -v);
        }
    }
}

/// Uniform seeded subsample of `m` rows, kept in original order. Returns the
/// input unchanged when `m >= n`.
pub fn subsample_rows(x: ArrayView2<'_, f64>, m: usize, seed: u64) -> Array2<f64> {
    let n = x.nrows();
    if m >= n {
        return x.to_owned();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, n, m).into_vec();
    idx.sort_unstable();
    x.select(Axis(0), &idx)
}

fn blob_err(path: &Path, message: impl Into<String>) -> PcaError {
    PcaError::Blob {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Writes the per-layer standardizer and PCA model so a sweep can resume
/// without refitting.
pub fn write_pca_blob(
    path: &Path,
    standardizer: &Standardizer,
    model: &PcaModel,
) -> Result<(), PcaError> {
    let io = |e| PcaError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let p = model.n_features();
    let k = model.k_max();
    if standardizer.n_features() != p {
        return Err(blob_err(path, "standardizer and model widths differ"));
    }
    (|| -> io::Result<()> {
        w.write_all(BLOB_MAGIC)?;
        w.write_u32::<LittleEndian>(BLOB_VERSION)?;
        w.write_u64::<LittleEndian>(model.n_fit as u64)?;
        w.write_u64::<LittleEndian>(p as u64)?;
        w.write_u64::<LittleEndian>(k as u64)?;
        w.write_f64::<LittleEndian>(standardizer.epsilon)?;
        w.write_f64::<LittleEndian>(model.total_variance)?;
        for v in standardizer.mean.iter().chain(standardizer.std.iter()) {
            w.write_f64::<LittleEndian>(*v)?;
        }
        for v in model
            .singular_values
            .iter()
            .chain(model.explained_variance_ratio.iter())
            .chain(model.components.iter())
        {
            w.write_f64::<LittleEndian>(*v)?;
        }
        w.flush()
    })()
    .map_err(io)
}

pub fn read_pca_blob(path: &Path) -> Result<(Standardizer, PcaModel), PcaError> {
    let file = File::open(path).map_err(|e| PcaError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut r = BufReader::new(file);
    let trunc = |e: io::Error| blob_err(path, format!("truncated: {e}"));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(trunc)?;
    if &magic != BLOB_MAGIC {
        return Err(blob_err(path, "bad magic"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(trunc)?;
    if version != BLOB_VERSION {
        return Err(blob_err(path, format!("version mismatch: {version}")));
    }
    let n_fit = r.read_u64::<LittleEndian>().map_err(trunc)? as usize;
    let p = r.read_u64::<LittleEndian>().map_err(trunc)? as usize;
    let k = r.read_u64::<LittleEndian>().map_err(trunc)? as usize;
    let epsilon = r.read_f64::<LittleEndian>().map_err(trunc)?;
    let total_variance = r.read_f64::<LittleEndian>().map_err(trunc)?;
    let mut read_vec = |len: usize| -> Result<Vec<f64>, PcaError> {
        let mut v = vec![0f64; len];
        r.read_f64_into::<LittleEndian>(&mut v).map_err(trunc)?;
        Ok(v)
    };
    let mean = Array1::from(read_vec(p)?);
    let std = Array1::from(read_vec(p)?);
    let singular_values = Array1::from(read_vec(k)?);
    let explained_variance_ratio = Array1::from(read_vec(k)?);
    let components = Array2::from_shape_vec((k, p), read_vec(k * p)?)
        .map_err(|e| blob_err(path, e.to_string()))?;
    Ok((
        Standardizer { mean, std, epsilon },
        PcaModel {
            components,
            singular_values,
            explained_variance_ratio,
            total_variance,
            n_fit,
        },
    ))
}
