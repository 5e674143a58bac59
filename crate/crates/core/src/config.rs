//! Run configuration and its field-level validation.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::activation_io::Manifest;
use crate::collapse::{DEFAULT_D_SMALL, DEFAULT_EPSILON};
use crate::pca::DEFAULT_K_MAX_CAP;
use crate::probes::{ModelKind, SvmParams, DEFAULT_K};
use crate::sweep::{SweepConfig, SweepGrid, DEFAULT_FRACTION};

pub const WORKERS_ENV: &str = "PROBEKIT_WORKERS";
pub const DEFAULT_OUTPUT_DIR: &str = "probekit-out";

fn default_models() -> Vec<ModelKind> {
    ModelKind::ALL.to_vec()
}
fn default_true() -> bool {
    true
}
fn default_k() -> usize {
    DEFAULT_K
}
fn default_c() -> f64 {
    1.0
}
fn default_tol() -> f64 {
    1e-4
}
fn default_max_epochs() -> usize {
    1000
}
fn default_fraction() -> f64 {
    DEFAULT_FRACTION
}
fn default_d_small() -> usize {
    DEFAULT_D_SMALL
}
fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}
fn default_cap() -> usize {
    DEFAULT_K_MAX_CAP
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default = "default_models")]
    pub models: Vec<ModelKind>,
    #[serde(default)]
    pub grid: Option<Vec<usize>>,
    #[serde(default = "default_true")]
    pub include_full: bool,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_c")]
    pub c_param: f64,
    #[serde(default = "default_tol")]
    pub svm_tol: f64,
    #[serde(default = "default_max_epochs")]
    pub svm_max_epochs: usize,
    #[serde(default = "default_fraction")]
    pub fraction: f64,
    #[serde(default = "default_d_small")]
    pub d_small: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_cap")]
    pub pca_k_max_cap: usize,
    #[serde(default)]
    pub pca_subsample: Option<usize>,
    /// Overrides the network accuracy recorded in the manifest.
    #[serde(default)]
    pub reference_accuracy: Option<f64>,
    #[serde(default)]
    pub strict: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

/// One problem with one field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub field: String,
    pub message: String,
}

impl Diagnostic {
    fn new(field: &str, message: impl Into<String>) -> Self {
        Diagnostic {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Vec<Diagnostic>> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| vec![Diagnostic::new("config", format!("config: {e}"))])?;
        let mut config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| vec![Diagnostic::new("config", format!("config: {e}"))])?;
        // relative paths in a config file are relative to the file
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(m) = &config.manifest {
            if m.is_relative() {
                config.manifest = Some(base.join(m));
            }
        }
        if let Some(o) = &config.output_dir {
            if o.is_relative() {
                config.output_dir = Some(base.join(o));
            }
        }
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Fills defaults that depend on the environment.
    pub fn normalize(&mut self) {
        if self.workers.is_none() {
            self.workers = std::env::var(WORKERS_ENV)
                .ok()
                .and_then(|v| v.trim().parse().ok());
        }
        if self.output_dir.is_none() {
            self.output_dir = Some(PathBuf::from(DEFAULT_OUTPUT_DIR));
        }
        let mut models = self.models.clone();
        models.sort();
        models.dedup();
        self.models = models;
    }

    /// Structural checks only; no file access.
    pub fn check_fields(&self) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        if self.manifest.is_none() {
            out.push(Diagnostic::new("manifest", "manifest: required"));
        }
        if self.models.is_empty() {
            out.push(Diagnostic::new(
                "models",
                "models: at least one of knn, ncc, svm required",
            ));
        }
        if self.k == 0 {
            out.push(Diagnostic::new("k", "k must be ≥ 1"));
        }
        if !(self.c_param > 0.0 && self.c_param.is_finite()) {
            out.push(Diagnostic::new("c_param", "c_param must be > 0"));
        }
        if !(self.svm_tol > 0.0 && self.svm_tol.is_finite()) {
            out.push(Diagnostic::new("svm_tol", "svm_tol must be > 0"));
        }
        if self.svm_max_epochs == 0 {
            out.push(Diagnostic::new(
                "svm_max_epochs",
                "svm_max_epochs must be ≥ 1",
            ));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            out.push(Diagnostic::new("fraction", "fraction must be in (0, 1]"));
        }
        if self.d_small == 0 {
            out.push(Diagnostic::new("d_small", "d_small must be ≥ 1"));
        }
        if !(self.epsilon >= 0.0 && self.epsilon < 1.0) {
            out.push(Diagnostic::new("epsilon", "epsilon must be in [0, 1)"));
        }
        if self.workers == Some(0) {
            out.push(Diagnostic::new("workers", "workers must be ≥ 1"));
        }
        if self.pca_k_max_cap == 0 {
            out.push(Diagnostic::new(
                "pca_k_max_cap",
                "pca_k_max_cap must be ≥ 1",
            ));
        }
        if matches!(self.pca_subsample, Some(m) if m < 2) {
            out.push(Diagnostic::new(
                "pca_subsample",
                "pca_subsample must be ≥ 2",
            ));
        }
        if let Some(r) = self.reference_accuracy {
            if !(0.0..=1.0).contains(&r) {
                out.push(Diagnostic::new(
                    "reference_accuracy",
                    "reference_accuracy must be in [0, 1]",
                ));
            }
        }
        if let Some(grid) = &self.grid {
            if let Err(e) = SweepGrid::new(grid.clone(), self.include_full) {
                out.push(Diagnostic::new("grid", format!("grid: {e}")));
            }
        }
        out
    }

    /// Structural plus referential checks: the manifest parses and every file
    /// it lists exists.
    pub fn validate(&self) -> Result<Manifest, Vec<Diagnostic>> {
        let mut diags = self.check_fields();
        let mut manifest = None;
        if let Some(path) = &self.manifest {
            match Manifest::load(path) {
                Ok(m) => {
                    for (i, layer) in m.layers.iter().enumerate() {
                        for p in [m.train_path(i), m.test_path(i)] {
                            if !p.exists() {
                                diags.push(Diagnostic::new(
                                    "manifest",
                                    format!(
                                        "manifest: layer {} file {} does not exist",
                                        layer.layer_id,
                                        p.display()
                                    ),
                                ));
                            }
                        }
                    }
                    manifest = Some(m);
                }
                Err(e) => diags.push(Diagnostic::new("manifest", format!("manifest: {e}"))),
            }
        }
        match manifest {
            Some(m) if diags.is_empty() => Ok(m),
            _ => Err(diags),
        }
    }

    pub fn sweep_config(&self) -> SweepConfig {
        SweepConfig {
            models: self.models.clone(),
            grid: self.grid.clone(),
            include_full: self.include_full,
            k: self.k,
            svm: SvmParams {
                c: self.c_param,
                tol: self.svm_tol,
                max_epochs: self.svm_max_epochs,
                seed: self.seed,
            },
            fraction: self.fraction,
            seed: self.seed,
            workers: self.workers,
            pca_k_max_cap: self.pca_k_max_cap,
            pca_subsample: self.pca_subsample,
            ..SweepConfig::default()
        }
    }
}

/// Loads, normalizes and validates a config file.
pub fn validate_config(path: &Path) -> Result<RunConfig, Vec<Diagnostic>> {
    let mut config = RunConfig::load(path)?;
    config.normalize();
    config.validate()?;
    Ok(config)
}
