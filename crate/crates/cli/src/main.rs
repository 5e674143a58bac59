use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use probekit::config::{validate_config, Diagnostic, WORKERS_ENV};
use probekit::report::{emit_plot_data, run_pipeline, write_outputs, PipelineError};
use probekit::synth::write_layer_family;
use probekit::{CollapseParams, LayerFamilySpec, ModelKind, RunConfig, RunReport};

#[derive(Parser)]
#[command(
    name = "probekit",
    version,
    about = "Layerwise PCA probing and collapse detection"
)]
struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the PCA x probe sweep and collapse analysis.
    Sweep(Box<RunArgs>),
    /// Recompute the collapse section of a saved report.
    Collapse(CollapseArgs),
    /// Write a synthetic layer family and its manifest.
    Synth(SynthArgs),
    /// Check a config file and print it normalized.
    Validate { config: PathBuf },
    /// Write plot-ready CSVs from a saved report.
    PlotData {
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = "plot-data")]
        out: PathBuf,
    },
}

/// Flags mirror the config file keys; a flag overrides the file.
#[derive(Args)]
struct RunArgs {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Comma-separated subset of knn,ncc,svm.
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<ModelKind>>,
    /// Comma-separated component counts.
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<usize>>,
    /// Skip the unprojected full-dimension cells.
    #[arg(long)]
    no_full: bool,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    c_param: Option<f64>,
    #[arg(long)]
    svm_tol: Option<f64>,
    #[arg(long)]
    svm_max_epochs: Option<usize>,
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    d_small: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, env = WORKERS_ENV)]
    workers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    pca_k_max_cap: Option<usize>,
    #[arg(long)]
    pca_subsample: Option<usize>,
    #[arg(long)]
    reference_accuracy: Option<f64>,
    /// Exit 3 when any probe emitted a warning.
    #[arg(long)]
    strict: bool,
}

#[derive(Args)]
struct CollapseArgs {
    /// report.json from a previous sweep.
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    d_small: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    reference_accuracy: Option<f64>,
    /// Where to write the updated report and CSVs; defaults to the report's directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Nine layers with collapse from layer 5.
    Collapse,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON layer family spec.
    #[arg(long, conflicts_with = "preset")]
    spec: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    seed: Option<u64>,
}

/// An error with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }

    fn data(message: impl ToString) -> Self {
        Failure {
            code: 3,
            message: message.to_string(),
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure {
            code: e.exit_code() as u8,
            message: e.to_string(),
        }
    }
}

fn diagnostics(diags: &[Diagnostic]) -> Failure {
    let lines: Vec<String> = diags.iter().map(|d| format!("  {d}")).collect();
    Failure::config(format!("invalid config:\n{}", lines.join("\n")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Sweep(args) => sweep(*args),
        Command::Collapse(args) => collapse(args),
        Command::Synth(args) => synth(args),
        Command::Validate { config } => validate(&config),
        Command::PlotData { report, out } => plot_data(&report, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run_config(args: RunArgs) -> Result<RunConfig, Failure> {
    let mut c = match &args.config {
        Some(path) => RunConfig::load(path).map_err(|d| diagnostics(&d))?,
        None => RunConfig::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => {
            $(if let Some(v) = args.$field { c.$field = v; })*
        };
    }
    set!(
        models,
        k,
        c_param,
        svm_tol,
        svm_max_epochs,
        fraction,
        d_small,
        epsilon,
        seed,
        pca_k_max_cap
    );
    macro_rules! set_opt {
        ($($field:ident),*) => {
            $(if args.$field.is_some() { c.$field = args.$field; })*
        };
    }
    set_opt!(
        manifest,
        grid,
        workers,
        output_dir,
        pca_subsample,
        reference_accuracy
    );
    if args.no_full {
        c.include_full = false;
    }
    if args.strict {
        c.strict = true;
    }
    Ok(c)
}

fn sweep(args: RunArgs) -> Result<(), Failure> {
    let config = run_config(args)?;
    let outcome = run_pipeline(&config)?;
    let report = &outcome.report;
    println!(
        "{:<12} {:<4} {:>8} {:>7} {:>9}",
        "layer", "model", "best", "d_min", "variance"
    );
    for s in &report.sweep.min_pcs {
        let d_min = s.d_min.map_or("full".to_string(), |d| d.to_string());
        println!(
            "{:<12} {:<4} {:>8.4} {:>7} {:>9.4}",
            s.layer_id, s.model, s.best_accuracy, d_min, s.variance_at_d_min
        );
    }
    if let Some(c) = &report.collapse {
        println!("collapse: {}", c.boundary_description);
    }
    if !report.sweep.warnings.is_empty() {
        eprintln!(
            "{} warning(s); see report.json",
            report.sweep.warnings.len()
        );
    }
    for f in &outcome.files {
        info!("wrote {}", f.display());
    }
    Ok(())
}

fn collapse(args: CollapseArgs) -> Result<(), Failure> {
    let mut report = RunReport::load(&args.report).map_err(Failure::data)?;
    if let Some(d) = args.d_small {
        report.config.d_small = d;
    }
    if let Some(e) = args.epsilon {
        report.config.epsilon = e;
    }
    if args.reference_accuracy.is_some() {
        report.config.reference_accuracy = args.reference_accuracy;
    }
    let diags: Vec<Diagnostic> = report
        .config
        .check_fields()
        .into_iter()
        .filter(|d| ["d_small", "epsilon", "reference_accuracy"].contains(&d.field.as_str()))
        .collect();
    if !diags.is_empty() {
        return Err(diagnostics(&diags));
    }
    let reference = report
        .config
        .reference_accuracy
        .or(report.network_accuracy)
        .ok_or_else(|| {
            Failure::config("reference_accuracy: required (the report has no network accuracy)")
        })?;
    let params = CollapseParams {
        d_small: report.config.d_small,
        epsilon: report.config.epsilon,
        reference_accuracy: reference,
    };
    let collapse = report.recompute_collapse(&params)?;
    println!("collapse: {}", collapse.boundary_description);
    report.collapse = Some(collapse);
    let out = match args.output_dir {
        Some(dir) => dir,
        None => args
            .report
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default(),
    };
    std::fs::create_dir_all(&out).map_err(|e| Failure::data(format!("{}: {e}", out.display())))?;
    write_outputs(&report, &out)?;
    Ok(())
}

fn synth(args: SynthArgs) -> Result<(), Failure> {
    let mut spec = match (&args.spec, args.preset) {
        (Some(path), _) => {
            LayerFamilySpec::load(path).map_err(|e| Failure::config(e.to_string()))?
        }
        (None, Some(Preset::Collapse)) => LayerFamilySpec::collapse_demo(),
        (None, None) => {
            return Err(Failure::config(
                "synth: one of --spec or --preset is required",
            ))
        }
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    spec.validate()
        .map_err(|e| Failure::config(e.to_string()))?;
    let manifest = write_layer_family(&spec, &args.out).map_err(Failure::data)?;
    println!("{}", args.out.join("manifest.json").display());
    if let Some(acc) = manifest.network_accuracy {
        info!("network accuracy {acc:.4}");
    }
    Ok(())
}

fn validate(path: &Path) -> Result<(), Failure> {
    let config = validate_config(path).map_err(|d| diagnostics(&d))?;
    println!("{}", config.to_json());
    Ok(())
}

fn plot_data(report: &Path, out: &Path) -> Result<(), Failure> {
    let report = RunReport::load(report).map_err(Failure::data)?;
    for f in emit_plot_data(&report, out)? {
        println!("{}", f.display());
    }
    Ok(())
}
