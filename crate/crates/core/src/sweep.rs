//! Layer x probe x component-count sweep.
//!
//! For every layer: fit the standardizer and PCA on the training split, project
//! both splits once at the largest grid `d`, then train and score each probe on
//! column prefixes of the projections. Finished cells are appended to a
//! line-delimited JSON journal; a rerun with the same seed skips them.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use log::{info, warn};
use ndarray::{s, Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::activation_io::{read_activation_set, ActivationSet, FormatError, Label, Manifest};
use crate::collapse::{nc1_ratio, nc4_agreement, CollapseError};
use crate::pca::{
    default_k_max, fit_pca, rank_limit, read_pca_blob, subsample_rows, write_pca_blob, PcaError,
    PcaModel, DEFAULT_K_MAX_CAP,
};
use crate::preprocess::{PreprocessError, Standardizer, DEFAULT_EPSILON};
use crate::probes::{
    evaluate_accuracy, fit_knn, fit_linear_svm, fit_ncc, predict_ncc, ModelKind, ProbeError,
    ProbeModel, SvmParams, DEFAULT_K,
};
use crate::seeds::derive_seed;

pub const DEFAULT_FRACTION: f64 = 0.9;

pub const JOURNAL_FILE: &str = "journal.jsonl";
pub const PCA_DIR: &str = "pca";

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("no models requested")]
    NoModels,
    #[error("invalid grid: {0}")]
    BadGrid(String),
    #[error("d = {d} exceeds the dimension of layer {layer_id} ({dim})")]
    DimExceedsLayer {
        d: usize,
        layer_id: String,
        dim: usize,
    },
    #[error("d = {d} exceeds the PCA rank limit {limit} of layer {layer_id}")]
    DimExceedsRank {
        d: usize,
        layer_id: String,
        limit: usize,
    },
    #[error("layer {layer_id}: {message}")]
    Layer { layer_id: String, message: String },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("{}: {source}", path.display())]
    Data {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error("layer {layer_id}: {source}")]
    Preprocess {
        layer_id: String,
        #[source]
        source: PreprocessError,
    },
    #[error("layer {layer_id}: {source}")]
    Pca {
        layer_id: String,
        #[source]
        source: PcaError,
    },
    #[error("layer {layer_id}, {model}, d = {d}: {source}")]
    Probe {
        layer_id: String,
        model: ModelKind,
        d: String,
        #[source]
        source: ProbeError,
    },
    #[error("layer {layer_id}: {source}")]
    Collapse {
        layer_id: String,
        #[source]
        source: CollapseError,
    },
    #[error("journal {path}: {message}")]
    Journal { path: PathBuf, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("invalid parameter: {0}")]
    BadParam(String),
}

/// Component counts to evaluate, plus whether to also score the unprojected
/// standardized activations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub dims: Vec<usize>,
    pub include_full: bool,
}

impl SweepGrid {
    pub fn new(dims: Vec<usize>, include_full: bool) -> Result<Self, SweepError> {
        if dims.is_empty() {
            return Err(SweepError::BadGrid("empty".into()));
        }
        if dims[0] == 0 {
            return Err(SweepError::BadGrid("d must be >= 1".into()));
        }
        if dims.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SweepError::BadGrid("not strictly increasing".into()));
        }
        Ok(SweepGrid { dims, include_full })
    }

    pub fn max_d(&self) -> usize {
        *self.dims.last().expect("grid is nonempty")
    }
}

/// 1..=20, 30, 40, 50, 100, 150, 200, 250, 300, 400, 500, 750, 1000, 1250,
/// 1500, 1750, 2000, then every 1000, truncated at `layer_dim` with
/// `layer_dim` itself appended.
pub fn default_grid(layer_dim: usize) -> SweepGrid {
    let head = (1..=20).chain([
        30, 40, 50, 100, 150, 200, 250, 300, 400, 500, 750, 1000, 1250, 1500, 1750, 2000,
    ]);
    let tail = (3..).map(|k| k * 1000);
    let mut dims: Vec<usize> = head.chain(tail).take_while(|&d| d <= layer_dim).collect();
    if dims.last() != Some(&layer_dim) && layer_dim >= 1 {
        dims.push(layer_dim);
    }
    SweepGrid {
        dims,
        include_full: true,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub d: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCurve {
    pub layer_index: usize,
    pub layer_id: String,
    pub model: ModelKind,
    /// Sorted by `d`.
    pub points: Vec<CurvePoint>,
    /// Accuracy on the unprojected standardized activations.
    pub full_dim_accuracy: Option<f64>,
}

impl AccuracyCurve {
    pub fn accuracy_at(&self, d: usize) -> Option<f64> {
        self.points.iter().find(|p| p.d == d).map(|p| p.accuracy)
    }

    pub fn best_accuracy(&self) -> f64 {
        self.points
            .iter()
            .map(|p| p.accuracy)
            .chain(self.full_dim_accuracy)
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinPcStat {
    pub layer_index: usize,
    pub layer_id: String,
    pub model: ModelKind,
    pub best_accuracy: f64,
    pub threshold: f64,
    /// Smallest grid `d` reaching the threshold. `None` when only the
    /// unprojected activations reach it.
    pub d_min: Option<usize>,
    /// Cumulative explained variance at `d_min` (1.0 when `d_min` is `None`).
    pub variance_at_d_min: f64,
}

/// Smallest grid `d` whose accuracy is at least `fraction` of the curve's best
/// accuracy (full-dimension accuracy included).
pub fn min_pcs_for_fraction(curve: &AccuracyCurve, fraction: f64, pca: &PcaModel) -> MinPcStat {
    min_pcs_with(curve, fraction, |d| {
        pca.explained_variance_cumulative(d).unwrap_or(1.0)
    })
}

/// Same as [`min_pcs_for_fraction`] with the explained-variance lookup supplied
/// by the caller.
pub fn min_pcs_with(
    curve: &AccuracyCurve,
    fraction: f64,
    variance: impl Fn(usize) -> f64,
) -> MinPcStat {
    let best = curve.best_accuracy();
    let threshold = fraction * best;
    let d_min = curve
        .points
        .iter()
        .find(|p| p.accuracy >= threshold)
        .map(|p| p.d);
    MinPcStat {
        layer_index: curve.layer_index,
        layer_id: curve.layer_id.clone(),
        model: curve.model,
        best_accuracy: best,
        threshold,
        d_min,
        variance_at_d_min: d_min.map_or(1.0, variance),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariancePoint {
    pub d: usize,
    pub cumulative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Nc1Point {
    pub d: usize,
    pub nc1_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub index: usize,
    pub layer_id: String,
    pub dim: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub n_classes: usize,
    pub k_max: usize,
    pub grid: Vec<usize>,
    /// Features whose training std was below epsilon.
    pub clamped_features: usize,
    /// On the standardized training split; `None` if between-class scatter
    /// is degenerate.
    pub nc1_ratio: Option<f64>,
    /// NCC (unprojected) test predictions vs the network's test predictions.
    pub nc4_agreement: Option<f64>,
    pub nc1_profile: Vec<Nc1Point>,
    pub explained_variance: Vec<VariancePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub models: Vec<ModelKind>,
    /// Explicit grid; `None` uses [`default_grid`] per layer.
    pub grid: Option<Vec<usize>>,
    pub include_full: bool,
    pub k: usize,
    pub svm: SvmParams,
    pub fraction: f64,
    pub seed: u64,
    pub workers: Option<usize>,
    pub pca_k_max_cap: usize,
    pub pca_subsample: Option<usize>,
    pub std_epsilon: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            models: ModelKind::ALL.to_vec(),
            grid: None,
            include_full: true,
            k: DEFAULT_K,
            svm: SvmParams::default(),
            fraction: DEFAULT_FRACTION,
            seed: 0,
            workers: None,
            pca_k_max_cap: DEFAULT_K_MAX_CAP,
            pca_subsample: None,
            std_epsilon: DEFAULT_EPSILON,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub layers: Vec<LayerSummary>,
    pub curves: Vec<AccuracyCurve>,
    pub min_pcs: Vec<MinPcStat>,
    pub warnings: Vec<String>,
    pub notes: Vec<String>,
}

/// One completed (layer, model, d) cell. `d == None` is the unprojected cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalRecord {
    pub layer_id: String,
    pub model: ModelKind,
    pub d: Option<usize>,
    pub accuracy: f64,
    pub wall_ms: u64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

type CellKey = (String, ModelKind, Option<usize>);

/// Append-only record of finished cells.
pub struct Journal {
    path: PathBuf,
    file: Mutex<File>,
    done: HashMap<CellKey, JournalRecord>,
}

impl Journal {
    /// Opens (or creates) the journal, keeping the records written with `seed`.
    pub fn open(path: &Path, seed: u64) -> Result<Self, SweepError> {
        let mut done = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(|e| SweepError::Io {
                path: path.to_path_buf(),
                source: e,
            })?);
            for (lineno, line) in reader.lines().enumerate() {
                let line = line.map_err(|e| SweepError::Io {
                    path: path.to_path_buf(),
                    source: e,
                })?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<JournalRecord>(&line) {
                    Ok(rec) if rec.seed == seed => {
                        done.insert((rec.layer_id.clone(), rec.model, rec.d), rec);
                    }
                    Ok(_) => {}
                    // a torn final line from an interrupted run is dropped
                    Err(e) => warn!("{}:{}: skipping record: {e}", path.display(), lineno + 1),
                }
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| SweepError::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
        Ok(Journal {
            path: path.to_path_buf(),
            file: Mutex::new(file),
            done,
        })
    }

    pub fn get(
        &self,
        layer_id: &str,
        model: ModelKind,
        d: Option<usize>,
    ) -> Option<&JournalRecord> {
        self.done.get(&(layer_id.to_string(), model, d))
    }

    pub fn len(&self) -> usize {
        self.done.len()
    }

    pub fn is_empty(&self) -> bool {
        self.done.is_empty()
    }

    pub fn append(&self, rec: &JournalRecord) -> Result<(), SweepError> {
        let mut line = serde_json::to_string(rec).expect("record serializes");
        line.push('\n');
        let mut file = self.file.lock().expect("journal lock poisoned");
        file.write_all(line.as_bytes())
            .and_then(|_| file.flush())
            .map_err(|e| SweepError::Journal {
                path: self.path.clone(),
                message: e.to_string(),
            })
    }
}

fn validate_config(config: &SweepConfig) -> Result<(), SweepError> {
    if config.models.is_empty() {
        return Err(SweepError::NoModels);
    }
    if config.k == 0 {
        return Err(SweepError::BadParam("k must be >= 1".into()));
    }
    if !(config.fraction > 0.0 && config.fraction <= 1.0) {
        return Err(SweepError::BadParam(format!(
            "fraction must be in (0, 1], got {}",
            config.fraction
        )));
    }
    if config.pca_k_max_cap == 0 {
        return Err(SweepError::BadParam("pca k_max cap must be >= 1".into()));
    }
    if let Some(grid) = &config.grid {
        SweepGrid::new(grid.clone(), config.include_full)?;
    }
    Ok(())
}

fn canonical_models(models: &[ModelKind]) -> Vec<ModelKind> {
    let mut models = models.to_vec();
    models.sort();
    models.dedup();
    models
}

/// Runs the sweep over every layer of `manifest`. With `state_dir`, fitted PCA
/// models and the cell journal are kept there and reused on rerun.
pub fn run_sweep(
    manifest: &Manifest,
    config: &SweepConfig,
    state_dir: Option<&Path>,
) -> Result<SweepReport, SweepError> {
    validate_config(config)?;
    let pool = {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(w) = config.workers {
            builder = builder.num_threads(w.max(1));
        }
        builder
            .build()
            .map_err(|e| SweepError::BadParam(format!("thread pool: {e}")))?
    };
    pool.install(|| run_sweep_inner(manifest, config, state_dir))
}

fn run_sweep_inner(
    manifest: &Manifest,
    config: &SweepConfig,
    state_dir: Option<&Path>,
) -> Result<SweepReport, SweepError> {
    let models = canonical_models(&config.models);
    let journal = match state_dir {
        Some(dir) => {
            fs::create_dir_all(dir.join(PCA_DIR)).map_err(|e| SweepError::Io {
                path: dir.to_path_buf(),
                source: e,
            })?;
            Some(Journal::open(&dir.join(JOURNAL_FILE), config.seed)?)
        }
        None => None,
    };
    if let Some(j) = &journal {
        if !j.is_empty() {
            info!("resuming: {} cells already in the journal", j.len());
        }
    }

    let mut report = SweepReport {
        layers: Vec::new(),
        curves: Vec::new(),
        min_pcs: Vec::new(),
        warnings: Vec::new(),
        notes: Vec::new(),
    };
    if config.grid.is_none() {
        report.notes.push(
            "default grid: layer dimension appended when not on the 1000-step ladder; \
             truncated at the PCA rank limit min(n-1, p, cap)"
                .into(),
        );
    }
    for (index, entry) in manifest.layers.iter().enumerate() {
        let layer = LayerRun::load(manifest, index, config)?;
        if layer.dim != entry.dim {
            return Err(SweepError::Layer {
                layer_id: entry.layer_id.clone(),
                message: format!("manifest says dim {}, files have {}", entry.dim, layer.dim),
            });
        }
        info!(
            "layer {index} ({}): n_train={} n_test={} p={} grid up to {}",
            entry.layer_id,
            layer.train.n_samples(),
            layer.test.n_samples(),
            layer.dim,
            layer.grid.max_d()
        );
        let fitted = layer.fit(index, config, state_dir)?;
        let (summary, curves, warnings) =
            fitted.run_cells(index, &models, config, journal.as_ref())?;
        for curve in &curves {
            report
                .min_pcs
                .push(min_pcs_for_fraction(curve, config.fraction, &fitted.pca));
        }
        if let Some(note) = &fitted.grid_note {
            report.notes.push(note.clone());
        }
        report.layers.push(summary);
        report.curves.extend(curves);
        report.warnings.extend(warnings);
    }
    Ok(report)
}

struct LayerRun {
    layer_id: String,
    train: ActivationSet,
    test: ActivationSet,
    dim: usize,
    grid: SweepGrid,
    grid_note: Option<String>,
}

impl LayerRun {
    fn load(manifest: &Manifest, index: usize, config: &SweepConfig) -> Result<Self, SweepError> {
        let entry = &manifest.layers[index];
        let layer_id = entry.layer_id.clone();
        let read = |path: PathBuf| {
            read_activation_set(&path).map_err(|source| SweepError::Data { path, source })
        };
        let train = read(manifest.train_path(index))?;
        let test = read(manifest.test_path(index))?;
        let fail = |message: String| SweepError::Layer {
            layer_id: layer_id.clone(),
            message,
        };
        if train.n_features() != test.n_features() {
            return Err(fail(format!(
                "train has {} features, test has {}",
                train.n_features(),
                test.n_features()
            )));
        }
        if train.n_classes != test.n_classes {
            return Err(fail("train and test disagree on n_classes".into()));
        }
        let dim = train.n_features();
        let limit = default_k_max(train.n_samples(), dim, config.pca_k_max_cap);
        let (grid, grid_note) = match &config.grid {
            Some(dims) => {
                for &d in dims {
                    if d > dim {
                        return Err(SweepError::DimExceedsLayer { d, layer_id, dim });
                    }
                    if d > limit {
                        return Err(SweepError::DimExceedsRank { d, layer_id, limit });
                    }
                }
                (SweepGrid::new(dims.clone(), config.include_full)?, None)
            }
            None => {
                let mut grid = default_grid(dim);
                grid.include_full = config.include_full;
                let before = grid.dims.len();
                grid.dims.retain(|&d| d <= limit);
                let note = (grid.dims.len() < before).then(|| {
                    format!("layer {layer_id}: grid truncated at d = {limit} (PCA rank limit)")
                });
                (grid, note)
            }
        };
        Ok(LayerRun {
            layer_id,
            train,
            test,
            dim,
            grid,
            grid_note,
        })
    }

    fn fit(
        self,
        index: usize,
        config: &SweepConfig,
        state_dir: Option<&Path>,
    ) -> Result<FittedLayer, SweepError> {
        let layer_id = self.layer_id.clone();
        let pre = |source| SweepError::Preprocess {
            layer_id: layer_id.clone(),
            source,
        };
        let pca_err = |source| SweepError::Pca {
            layer_id: layer_id.clone(),
            source,
        };
        let k_max = self.grid.max_d();
        let n = self.train.n_samples();
        let expected_n_fit = config.pca_subsample.filter(|&m| m < n).unwrap_or(n);
        let blob_path = state_dir.map(|dir| dir.join(PCA_DIR).join(blob_name(index, &layer_id)));

        let cached = match &blob_path {
            Some(path) if path.exists() => match read_pca_blob(path) {
                Ok((s, m))
                    if m.k_max() == k_max
                        && m.n_features() == self.dim
                        && m.n_fit == expected_n_fit =>
                {
                    info!("layer {layer_id}: reusing {}", path.display());
                    Some((s, m))
                }
                Ok(_) => None,
                Err(e) => {
                    warn!("ignoring unreadable PCA blob: {e}");
                    None
                }
            },
            _ => None,
        };
        let standardizer = match &cached {
            Some((s, _)) => s.clone(),
            None => Standardizer::fit(self.train.data.view(), config.std_epsilon).map_err(pre)?,
        };
        let train_z = standardizer.apply(self.train.data.view()).map_err(pre)?;
        let test_z = standardizer.apply(self.test.data.view()).map_err(pre)?;
        let pca = match cached {
            Some((_, m)) => m,
            None => {
                let model = match config.pca_subsample {
                    Some(m) if m < n => {
                        let rows = subsample_rows(
                            train_z.view(),
                            m,
                            derive_seed(config.seed, &[index as u64, 0x5ca1e]),
                        );
                        if k_max > rank_limit(rows.nrows(), self.dim) {
                            return Err(SweepError::DimExceedsRank {
                                d: k_max,
                                layer_id,
                                limit: rank_limit(rows.nrows(), self.dim),
                            });
                        }
                        fit_pca(rows.view(), k_max).map_err(pca_err)?
                    }
                    _ => fit_pca(train_z.view(), k_max).map_err(pca_err)?,
                };
                if let Some(path) = &blob_path {
                    write_pca_blob(path, &standardizer, &model).map_err(pca_err)?;
                }
                model
            }
        };
        let train_proj = pca.project(train_z.view(), k_max).map_err(pca_err)?;
        let test_proj = pca.project(test_z.view(), k_max).map_err(pca_err)?;
        Ok(FittedLayer {
            layer_id: self.layer_id,
            dim: self.dim,
            grid: self.grid,
            grid_note: self.grid_note,
            train: self.train,
            test: self.test,
            standardizer,
            train_z,
            test_z,
            train_proj,
            test_proj,
            pca,
        })
    }
}

fn blob_name(index: usize, layer_id: &str) -> String {
    let safe: String = layer_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{index:03}_{safe}.pca")
}

struct FittedLayer {
    layer_id: String,
    dim: usize,
    grid: SweepGrid,
    grid_note: Option<String>,
    train: ActivationSet,
    test: ActivationSet,
    standardizer: Standardizer,
    train_z: Array2<f64>,
    test_z: Array2<f64>,
    train_proj: Array2<f64>,
    test_proj: Array2<f64>,
    pca: PcaModel,
}

struct CellOutcome {
    accuracy: f64,
    warning: Option<String>,
}

impl FittedLayer {
    fn views(&self, d: Option<usize>) -> (ArrayView2<'_, f64>, ArrayView2<'_, f64>) {
        match d {
            Some(d) => (
                self.train_proj.slice(s![.., ..d]),
                self.test_proj.slice(s![.., ..d]),
            ),
            None => (self.train_z.view(), self.test_z.view()),
        }
    }

    fn run_cell(
        &self,
        index: usize,
        model: ModelKind,
        d: Option<usize>,
        config: &SweepConfig,
    ) -> Result<CellOutcome, SweepError> {
        let (train, test) = self.views(d);
        let labels: &[Label] = &self.train.labels;
        let n_classes = self.train.n_classes;
        let wrap = |source| SweepError::Probe {
            layer_id: self.layer_id.clone(),
            model,
            d: d.map_or("full".into(), |d| d.to_string()),
            source,
        };
        let mut warning = None;
        let probe = match model {
            ModelKind::Knn => {
                ProbeModel::Knn(fit_knn(train, labels, n_classes, config.k).map_err(wrap)?)
            }
            ModelKind::Ncc => ProbeModel::Ncc(fit_ncc(train, labels, n_classes).map_err(wrap)?),
            ModelKind::Svm => {
                let params = SvmParams {
                    seed: derive_seed(config.seed, &[index as u64]),
                    ..config.svm
                };
                let m = fit_linear_svm(train, labels, n_classes, &params).map_err(wrap)?;
                if let Some(e) = m.non_convergence() {
                    let d = d.map_or("full".into(), |d| d.to_string());
                    warning = Some(format!("layer {}, svm, d = {d}: {e}", self.layer_id));
                }
                ProbeModel::Svm(m)
            }
        };
        let pred = probe.predict(test).map_err(wrap)?;
        let accuracy = evaluate_accuracy(&pred, &self.test.labels).map_err(wrap)?;
        Ok(CellOutcome { accuracy, warning })
    }

    fn summary(&self, index: usize) -> Result<LayerSummary, SweepError> {
        let nc = |source| SweepError::Collapse {
            layer_id: self.layer_id.clone(),
            source,
        };
        let labels = &self.train.labels;
        let n_classes = self.train.n_classes;
        let degenerate_ok = |r: Result<f64, CollapseError>| match r {
            Ok(v) => Ok(Some(v)),
            Err(CollapseError::DegenerateBetween) => Ok(None),
            Err(e) => Err(nc(e)),
        };
        let nc1 = degenerate_ok(nc1_ratio(self.train_z.view(), labels, n_classes))?;
        let nc1_profile = self
            .grid
            .dims
            .iter()
            .map(|&d| {
                let r = nc1_ratio(self.train_proj.slice(s![.., ..d]), labels, n_classes);
                Ok(Nc1Point {
                    d,
                    nc1_ratio: degenerate_ok(r)?,
                })
            })
            .collect::<Result<Vec<_>, SweepError>>()?;
        let nc4 = match &self.test.network_preds {
            Some(net) => {
                let wrap = |source| SweepError::Probe {
                    layer_id: self.layer_id.clone(),
                    model: ModelKind::Ncc,
                    d: "full".into(),
                    source,
                };
                let ncc = fit_ncc(self.train_z.view(), labels, n_classes).map_err(wrap)?;
                let pred = predict_ncc(&ncc, self.test_z.view()).map_err(wrap)?;
                Some(nc4_agreement(&pred, net).map_err(nc)?)
            }
            None => None,
        };
        let explained_variance = self
            .grid
            .dims
            .iter()
            .map(|&d| VariancePoint {
                d,
                cumulative: self.pca.explained_variance_cumulative(d).unwrap_or(1.0),
            })
            .collect();
        Ok(LayerSummary {
            index,
            layer_id: self.layer_id.clone(),
            dim: self.dim,
            n_train: self.train.n_samples(),
            n_test: self.test.n_samples(),
            n_classes,
            k_max: self.pca.k_max(),
            grid: self.grid.dims.clone(),
            clamped_features: self.standardizer.clamped_columns().len(),
            nc1_ratio: nc1,
            nc4_agreement: nc4,
            nc1_profile,
            explained_variance,
        })
    }

    fn run_cells(
        &self,
        index: usize,
        models: &[ModelKind],
        config: &SweepConfig,
        journal: Option<&Journal>,
    ) -> Result<(LayerSummary, Vec<AccuracyCurve>, Vec<String>), SweepError> {
        let mut cells: Vec<(ModelKind, Option<usize>)> = Vec::new();
        for &model in models {
            for &d in &self.grid.dims {
                cells.push((model, Some(d)));
            }
            if self.grid.include_full {
                cells.push((model, None));
            }
        }

        let outcomes: Vec<CellOutcome> = cells
            .par_iter()
            .map(|&(model, d)| {
                if let Some(rec) = journal.and_then(|j| j.get(&self.layer_id, model, d)) {
                    return Ok(CellOutcome {
                        accuracy: rec.accuracy,
                        warning: rec.warning.clone(),
                    });
                }
                let start = Instant::now();
                let out = self.run_cell(index, model, d, config)?;
                if let Some(j) = journal {
                    j.append(&JournalRecord {
                        layer_id: self.layer_id.clone(),
                        model,
                        d,
                        accuracy: out.accuracy,
                        wall_ms: start.elapsed().as_millis() as u64,
                        seed: config.seed,
                        warning: out.warning.clone(),
                    })?;
                }
                Ok(out)
            })
            .collect::<Result<_, SweepError>>()?;

        let mut curves = Vec::new();
        let mut warnings = Vec::new();
        for &model in models {
            let mut curve = AccuracyCurve {
                layer_index: index,
                layer_id: self.layer_id.clone(),
                model,
                points: Vec::new(),
                full_dim_accuracy: None,
            };
            for ((m, d), out) in cells.iter().zip(&outcomes) {
                if *m != model {
                    continue;
                }
                match d {
                    Some(d) => curve.points.push(CurvePoint {
                        d: *d,
                        accuracy: out.accuracy,
                    }),
                    None => curve.full_dim_accuracy = Some(out.accuracy),
                }
                if let Some(w) = &out.warning {
                    warnings.push(w.clone());
                }
            }
            curves.push(curve);
        }
        Ok((self.summary(index)?, curves, warnings))
    }
}
