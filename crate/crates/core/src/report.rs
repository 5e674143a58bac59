//! End-to-end pipeline, the JSON report, and CSV emission.
//!
//! Every number written to a CSV is formatted exactly as `serde_json` formats
//! it in `report.json`, so the two can be joined textually.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::activation_io::Manifest;
use crate::collapse::{build_collapse_report, CollapseError, CollapseParams, CollapseReport};
use crate::config::{Diagnostic, RunConfig};
use crate::probes::ModelKind;
use crate::sweep::{run_sweep, SweepError, SweepReport};

pub const REPORT_VERSION: u32 = 1;
pub const REPORT_FILE: &str = "report.json";
pub const CURVES_CSV: &str = "curves.csv";
pub const MIN_PCS_CSV: &str = "min_pcs.csv";
pub const COLLAPSE_CSV: &str = "collapse.csv";
pub const STATE_DIR: &str = "state";

pub const ACCURACY_VS_D_CSV: &str = "accuracy_vs_d.csv";
pub const DMIN_VS_LAYER_CSV: &str = "dmin_vs_layer.csv";
pub const VARIANCE_VS_LAYER_CSV: &str = "variance_vs_layer.csv";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config:\n  {}", .0.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("\n  "))]
    Config(Vec<Diagnostic>),
    #[error(transparent)]
    Sweep(#[from] SweepError),
    #[error(transparent)]
    Collapse(#[from] CollapseError),
    #[error("{path}: {message}")]
    Output { path: PathBuf, message: String },
    #[error("{0} warning(s) with --strict:\n  {1}")]
    StrictWarnings(usize, String),
}

impl PipelineError {
    /// 2 for configuration problems, 3 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            _ => 3,
        }
    }
}

fn out_err(path: &Path, e: impl ToString) -> PipelineError {
    PipelineError::Output {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: u32,
    pub tool_version: String,
    /// Unix seconds; the only field that differs between identical runs.
    pub timestamp: u64,
    pub seed: u64,
    pub config: RunConfig,
    pub network_accuracy: Option<f64>,
    #[serde(flatten)]
    pub sweep: SweepReport,
    pub collapse: Option<CollapseReport>,
}

impl RunReport {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| out_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| out_err(path, e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        std::fs::write(path, self.to_json()).map_err(|e| out_err(path, e))
    }

    /// Rebuilds the collapse section with different parameters. Fails when the
    /// report does not hold curves for all three probes.
    pub fn recompute_collapse(
        &self,
        params: &CollapseParams,
    ) -> Result<CollapseReport, PipelineError> {
        Ok(build_collapse_report(&self.sweep, params)?)
    }
}

/// Reference accuracy for collapse detection: explicit override, else the
/// manifest's network accuracy.
pub fn reference_accuracy(config: &RunConfig, manifest: &Manifest) -> Option<f64> {
    config.reference_accuracy.or(manifest.network_accuracy)
}

pub struct PipelineOutcome {
    pub report: RunReport,
    pub files: Vec<PathBuf>,
}

/// Validates the config, runs the sweep and collapse analysis, and writes
/// `report.json` plus the three CSVs into the output directory.
pub fn run_pipeline(config: &RunConfig) -> Result<PipelineOutcome, PipelineError> {
    let mut config = config.clone();
    config.normalize();
    let manifest = config.validate().map_err(PipelineError::Config)?;
    let out_dir = config.output_dir.clone().expect("normalized");
    std::fs::create_dir_all(&out_dir).map_err(|e| out_err(&out_dir, e))?;

    let mut sweep = run_sweep(
        &manifest,
        &config.sweep_config(),
        Some(&out_dir.join(STATE_DIR)),
    )?;
    let network_accuracy = manifest.network_accuracy;
    let has_all = ModelKind::ALL.iter().all(|m| config.models.contains(m));
    let collapse = match reference_accuracy(&config, &manifest) {
        Some(reference) if has_all => {
            let params = CollapseParams {
                d_small: config.d_small,
                epsilon: config.epsilon,
                reference_accuracy: reference,
            };
            Some(build_collapse_report(&sweep, &params)?)
        }
        Some(_) => {
            sweep
                .notes
                .push("collapse detection skipped: needs knn, ncc and svm curves".into());
            None
        }
        None => {
            sweep.notes.push(
                "collapse detection skipped: no reference accuracy in manifest or config".into(),
            );
            None
        }
    };
    if let Some(c) = &collapse {
        info!("collapse: {}", c.boundary_description);
    }

    let mut echo = config.clone();
    echo.output_dir = None;
    let report = RunReport {
        version: REPORT_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        timestamp: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        seed: config.seed,
        config: echo,
        network_accuracy,
        sweep,
        collapse,
    };
    let files = write_outputs(&report, &out_dir)?;
    for w in &report.sweep.warnings {
        warn!("{w}");
    }
    if config.strict && !report.sweep.warnings.is_empty() {
        return Err(PipelineError::StrictWarnings(
            report.sweep.warnings.len(),
            report.sweep.warnings.join("\n  "),
        ));
    }
    Ok(PipelineOutcome { report, files })
}

pub fn write_outputs(report: &RunReport, out_dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let report_path = out_dir.join(REPORT_FILE);
    report.save(&report_path)?;
    let mut files = vec![report_path];
    files.push(write_csv(&out_dir.join(CURVES_CSV), &curves_table(report))?);
    files.push(write_csv(
        &out_dir.join(MIN_PCS_CSV),
        &min_pcs_table(report),
    )?);
    files.push(write_csv(
        &out_dir.join(COLLAPSE_CSV),
        &collapse_table(report),
    )?);
    Ok(files)
}

/// Header row followed by data rows.
pub type Table = Vec<Vec<String>>;

fn num(v: f64) -> String {
    serde_json::to_string(&v).expect("finite number")
}

fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn row(cells: &[&str]) -> Vec<String> {
    cells.iter().map(|s| s.to_string()).collect()
}

pub fn write_csv(path: &Path, table: &Table) -> Result<PathBuf, PipelineError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| out_err(path, e))?;
    for r in table {
        w.write_record(r).map_err(|e| out_err(path, e))?;
    }
    w.flush().map_err(|e| out_err(path, e))?;
    Ok(path.to_path_buf())
}

/// `layer, model, d, accuracy`: one row per grid point.
pub fn curves_table(report: &RunReport) -> Table {
    let mut t = vec![row(&["layer", "model", "d", "accuracy"])];
    for c in &report.sweep.curves {
        for p in &c.points {
            t.push(vec![
                c.layer_id.clone(),
                c.model.to_string(),
                p.d.to_string(),
                num(p.accuracy),
            ]);
        }
    }
    t
}

pub fn min_pcs_table(report: &RunReport) -> Table {
    let mut t = vec![row(&[
        "layer",
        "model",
        "best_acc",
        "threshold",
        "d_min",
        "variance_at_d_min",
    ])];
    for s in &report.sweep.min_pcs {
        t.push(vec![
            s.layer_id.clone(),
            s.model.to_string(),
            num(s.best_accuracy),
            num(s.threshold),
            s.d_min
                .map(|d| d.to_string())
                .unwrap_or_else(|| "full".into()),
            num(s.variance_at_d_min),
        ]);
    }
    t
}

pub fn collapse_table(report: &RunReport) -> Table {
    let mut header = row(&["layer", "nc1_ratio", "nc4_agreement"]);
    for m in ModelKind::ALL {
        header.push(format!("{m}_acc_at_d_small"));
    }
    let mut t = vec![header];
    for layer in &report.sweep.layers {
        let mut r = vec![
            layer.layer_id.clone(),
            opt_num(layer.nc1_ratio),
            opt_num(layer.nc4_agreement),
        ];
        let accs = report
            .collapse
            .as_ref()
            .and_then(|c| c.layers.iter().find(|l| l.layer_index == layer.index));
        for m in ModelKind::ALL {
            r.push(opt_num(
                accs.and_then(|a| a.small_d_accuracy.get(&m).copied()),
            ));
        }
        t.push(r);
    }
    t
}

/// Accuracy vs d per layer and probe.
pub fn accuracy_vs_d_table(report: &RunReport) -> Table {
    let mut t = vec![row(&["layer_index", "layer", "model", "d", "accuracy"])];
    for c in &report.sweep.curves {
        for p in &c.points {
            t.push(vec![
                c.layer_index.to_string(),
                c.layer_id.clone(),
                c.model.to_string(),
                p.d.to_string(),
                num(p.accuracy),
            ]);
        }
    }
    t
}

/// d_min vs layer per probe.
pub fn dmin_vs_layer_table(report: &RunReport) -> Table {
    let mut t = vec![row(&["layer_index", "layer", "model", "d_min"])];
    for s in &report.sweep.min_pcs {
        t.push(vec![
            s.layer_index.to_string(),
            s.layer_id.clone(),
            s.model.to_string(),
            s.d_min
                .map(|d| d.to_string())
                .unwrap_or_else(|| "full".into()),
        ]);
    }
    t
}

/// Explained variance at d_min vs layer per probe.
pub fn variance_vs_layer_table(report: &RunReport) -> Table {
    let mut t = vec![row(&["layer_index", "layer", "model", "variance_at_d_min"])];
    for s in &report.sweep.min_pcs {
        t.push(vec![
            s.layer_index.to_string(),
            s.layer_id.clone(),
            s.model.to_string(),
            num(s.variance_at_d_min),
        ]);
    }
    t
}

/// Writes the three plot-ready CSVs.
pub fn emit_plot_data(report: &RunReport, out_dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    std::fs::create_dir_all(out_dir).map_err(|e| out_err(out_dir, e))?;
    Ok(vec![
        write_csv(
            &out_dir.join(ACCURACY_VS_D_CSV),
            &accuracy_vs_d_table(report),
        )?,
        write_csv(
            &out_dir.join(DMIN_VS_LAYER_CSV),
            &dmin_vs_layer_table(report),
        )?,
        write_csv(
            &out_dir.join(VARIANCE_VS_LAYER_CSV),
            &variance_vs_layer_table(report),
        )?,
    ])
}
