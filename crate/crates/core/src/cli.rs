//! Command-line front end: `merge`, `analyze` and `calibrate`.
//!
//! Errors are reported on stderr as a single JSON line
//! `{"error":"<kind>","code":<exit>,"message":"..."}`. Exit codes: 0 success,
//! 1 usage error, 2 data error, 3 numerical failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::checkpoint::{compute_deltas, load_checkpoint, write_atomic, DeltaStore, TensorStore};
use crate::error::{Error, ErrorClass, Result};
use crate::linalg::{svd, Matrix};
use crate::merge::{assemble_weights, merge_store, DareBase, MergeMethod, MergedDelta};
use crate::spectral::{gap_report, AnalysisOptions, Basis, SubspaceOverlapReport};
use crate::svc::{
    calibrate_store_detailed, CalibrationConfig, CalibrationMode, ParamFilter, ParamOutcome,
};

pub const REPORT_SCHEMA: u32 = 1;
pub const CSV_HEADER: &str = "parameter,r,sigma,sigma_star,gap,gamma,min_s,max_s,mean_s";

#[derive(Debug, Parser)]
#[command(
    name = "spectral-merge",
    version,
    about = "Merge fine-tuned checkpoints and calibrate the merged spectrum"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Merge task checkpoints into one, optionally calibrating singular values.
    Merge(MergeArgs),
    /// Emit per-subspace overlap diagnostics without writing a checkpoint.
    Analyze(AnalyzeArgs),
    /// Calibrate an already merged checkpoint.
    Calibrate(CalibrateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Sum,
    Average,
    Ties,
    Dare,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DareBaseArg {
    Sum,
    Average,
}

#[derive(Debug, Args)]
struct InputArgs {
    /// Pre-trained checkpoint.
    #[arg(long, value_name = "PATH")]
    pretrained: PathBuf,
    /// Fine-tuned checkpoint; repeat once per task (order defines task ids).
    #[arg(long = "model", value_name = "PATH", required = true)]
    models: Vec<PathBuf>,
    /// Parameters to calibrate (glob, repeatable; default all).
    #[arg(long, value_name = "GLOB")]
    include: Vec<String>,
    /// Parameters to leave uncalibrated (glob, repeatable).
    #[arg(long, value_name = "GLOB")]
    exclude: Vec<String>,
    /// Worker threads (0 picks the number of cores).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Print one summary line per parameter.
    #[arg(short, long)]
    verbose: bool,
}

#[derive(Debug, Args)]
struct MethodArgs {
    #[arg(long, value_enum, default_value_t = MethodArg::Sum)]
    method: MethodArg,
    /// TIES: fraction of entries kept per task.
    #[arg(long, default_value_t = crate::merge::DEFAULT_TIES_TRIM)]
    ties_trim: f64,
    /// DARE: drop probability.
    #[arg(long, default_value_t = crate::merge::DEFAULT_DARE_DROP)]
    dare_drop: f64,
    #[arg(long, value_enum, default_value_t = DareBaseArg::Sum)]
    dare_base: DareBaseArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct SvcArgs {
    /// Floor on the projection coefficients, in (0, 1]; defaults to 1/K.
    #[arg(long)]
    alpha: Option<f64>,
    /// Calibrate toward a single task (0-based index into --model).
    #[arg(long, value_name = "INDEX")]
    target_task: Option<usize>,
    /// Use right singular vectors for the overlap basis.
    #[arg(long)]
    row_space: bool,
}

#[derive(Debug, Args)]
struct MergeArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    method: MethodArgs,
    /// Apply singular value calibration to the merged update.
    #[arg(long)]
    svc: bool,
    #[command(flatten)]
    svc_args: SvcArgs,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    lambda: f64,
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    /// JSON report of the calibration factors.
    #[arg(long, value_name = "PATH")]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    method: MethodArgs,
    /// Floor used for the reported calibration factor; defaults to 1/K.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    row_space: bool,
    /// JSON report destination.
    #[arg(long, value_name = "PATH")]
    report: PathBuf,
    /// CSV destination (defaults to the report path with a .csv extension).
    #[arg(long, value_name = "PATH")]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Merged checkpoint to calibrate.
    #[arg(long, value_name = "PATH")]
    merged: PathBuf,
    /// Scale the merged checkpoint was assembled with.
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    merged_lambda: f64,
    /// Base method that produced the merged checkpoint (recorded in the report).
    #[command(flatten)]
    method: MethodArgs,
    #[command(flatten)]
    svc_args: SvcArgs,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    lambda: f64,
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    #[arg(long, value_name = "PATH")]
    report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandKind {
    Merge,
    Analyze,
    Calibrate,
}

/// Fully resolved options for one invocation.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub subcommand: CommandKind,
    pub pretrained_path: PathBuf,
    pub model_paths: Vec<PathBuf>,
    pub merged_path: Option<PathBuf>,
    pub merged_lambda: f64,
    pub method: MergeMethod,
    pub calibration: Option<CalibrationConfig>,
    /// Floor for the diagnostic calibration factor in `analyze`.
    pub analysis_alpha: f64,
    pub basis: Basis,
    pub lambda: f64,
    pub out_path: Option<PathBuf>,
    pub report_path: Option<PathBuf>,
    pub csv_path: Option<PathBuf>,
    pub include: Vec<String>,
    pub exclude: Vec<String>,
    pub jobs: usize,
    pub verbose: bool,
}

fn method_from(args: &MethodArgs) -> MergeMethod {
    match args.method {
        MethodArg::Sum => MergeMethod::Sum,
        MethodArg::Average => MergeMethod::Average,
        MethodArg::Ties => MergeMethod::Ties {
            trim_fraction: args.ties_trim,
        },
        MethodArg::Dare => MergeMethod::Dare {
            drop_rate: args.dare_drop,
            base: match args.dare_base {
                DareBaseArg::Sum => DareBase::Sum,
                DareBaseArg::Average => DareBase::Average,
            },
            seed: args.seed,
        },
    }
}

fn calibration_from(args: &SvcArgs, tasks: usize) -> CalibrationConfig {
    let mut cfg = match args.alpha {
        Some(a) => CalibrationConfig::new(a),
        None => CalibrationConfig::for_tasks(tasks),
    };
    if let Some(target) = args.target_task {
        cfg = cfg.with_mode(CalibrationMode::Preference { target });
    }
    if args.row_space {
        cfg = cfg.with_basis(Basis::RowSpace);
    }
    cfg
}

impl RunConfig {
    fn from_cli(cli: Cli) -> Result<Self> {
        let cfg = match cli.command {
            Command::Merge(a) => {
                let k = a.input.models.len();
                let uses_svc_flags = a.svc_args.alpha.is_some()
                    || a.svc_args.target_task.is_some()
                    || a.svc_args.row_space;
                if uses_svc_flags && !a.svc {
                    return Err(Error::InvalidConfig(
                        "--alpha, --target-task and --row-space require --svc".into(),
                    ));
                }
                let calibration = a.svc.then(|| calibration_from(&a.svc_args, k));
                RunConfig {
                    subcommand: CommandKind::Merge,
                    method: method_from(&a.method),
                    analysis_alpha: calibration.map_or(1.0 / k as f64, |c| c.alpha),
                    basis: calibration.map_or(Basis::ColumnSpace, |c| c.basis),
                    calibration,
                    lambda: a.lambda,
                    out_path: Some(a.out),
                    report_path: a.report,
                    csv_path: None,
                    merged_path: None,
                    merged_lambda: 1.0,
                    pretrained_path: a.input.pretrained,
                    model_paths: a.input.models,
                    include: a.input.include,
                    exclude: a.input.exclude,
                    jobs: a.input.jobs,
                    verbose: a.input.verbose,
                }
            }
            Command::Analyze(a) => {
                let k = a.input.models.len();
                let csv = a.csv.unwrap_or_else(|| a.report.with_extension("csv"));
                RunConfig {
                    subcommand: CommandKind::Analyze,
                    method: method_from(&a.method),
                    calibration: None,
                    analysis_alpha: a.alpha.unwrap_or(1.0 / k as f64),
                    basis: if a.row_space {
                        Basis::RowSpace
                    } else {
                        Basis::ColumnSpace
                    },
                    lambda: 1.0,
                    out_path: None,
                    report_path: Some(a.report),
                    csv_path: Some(csv),
                    merged_path: None,
                    merged_lambda: 1.0,
                    pretrained_path: a.input.pretrained,
                    model_paths: a.input.models,
                    include: a.input.include,
                    exclude: a.input.exclude,
                    jobs: a.input.jobs,
                    verbose: a.input.verbose,
                }
            }
            Command::Calibrate(a) => {
                let k = a.input.models.len();
                let calibration = calibration_from(&a.svc_args, k);
                RunConfig {
                    subcommand: CommandKind::Calibrate,
                    method: method_from(&a.method),
                    analysis_alpha: calibration.alpha,
                    basis: calibration.basis,
                    calibration: Some(calibration),
                    lambda: a.lambda,
                    out_path: Some(a.out),
                    report_path: a.report,
                    csv_path: None,
                    merged_path: Some(a.merged),
                    merged_lambda: a.merged_lambda,
                    pretrained_path: a.input.pretrained,
                    model_paths: a.input.models,
                    include: a.input.include,
                    exclude: a.input.exclude,
                    jobs: a.input.jobs,
                    verbose: a.input.verbose,
                }
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_paths.is_empty() {
            return Err(Error::InvalidConfig(
                "at least one --model is required".into(),
            ));
        }
        if !self.lambda.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "lambda {} is not finite",
                self.lambda
            )));
        }
        if !self.merged_lambda.is_finite() || self.merged_lambda == 0.0 {
            return Err(Error::InvalidConfig(format!(
                "merged lambda {} must be finite and nonzero",
                self.merged_lambda
            )));
        }
        self.method.validate()?;
        if let Some(c) = &self.calibration {
            c.validate(self.model_paths.len())?;
        }
        if !(self.analysis_alpha > 0.0 && self.analysis_alpha <= 1.0) {
            return Err(Error::InvalidAlpha(self.analysis_alpha));
        }
        ParamFilter::new(&self.include, &self.exclude)?;
        Ok(())
    }
}

/// Parses `args` (including the program name) and runs the selected command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() {
                ErrorClass::Usage as i32
            } else {
                0
            };
            let _ = e.print();
            return code;
        }
    };
    let result = RunConfig::from_cli(cli).and_then(|cfg| execute(&cfg));
    match result {
        Ok(()) => 0,
        Err(e) => {
            let code = e.class() as i32;
            let line = json!({ "error": e.kind(), "code": code, "message": e.to_string() });
            eprintln!("{line}");
            code
        }
    }
}

pub fn execute(cfg: &RunConfig) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
    pool.install(|| match cfg.subcommand {
        CommandKind::Merge => run_merge(cfg),
        CommandKind::Analyze => run_analyze(cfg),
        CommandKind::Calibrate => run_calibrate(cfg),
    })
}

struct Inputs {
    pretrained: TensorStore,
    deltas: Vec<DeltaStore>,
}

fn load_inputs(cfg: &RunConfig) -> Result<Inputs> {
    let pretrained = load_checkpoint(&cfg.pretrained_path)?;
    let deltas = cfg
        .model_paths
        .iter()
        .map(|p| compute_deltas(&pretrained, &load_checkpoint(p)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Inputs { pretrained, deltas })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| Error::InvalidConfig(format!("report serialization: {e}")))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

#[derive(Serialize)]
struct CalibrationReport<'a> {
    schema: u32,
    command: CommandKind,
    tasks: usize,
    method: &'a MergeMethod,
    lambda: f64,
    calibration: Option<&'a CalibrationConfig>,
    parameters: Vec<ParamEntry<'a>>,
}

#[derive(Serialize)]
struct ParamEntry<'a> {
    name: &'a str,
    shape: &'a [usize],
    #[serde(flatten)]
    outcome: &'a ParamOutcome,
}

fn summarize(name: &str, outcome: &ParamOutcome) -> String {
    match outcome {
        ParamOutcome::Matrix { rows, cols, result } => {
            let (lo, hi) = result
                .gamma
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &g| {
                    (lo.min(g), hi.max(g))
                });
            let before: f64 = result.sigma.iter().map(|s| s * s).sum::<f64>().sqrt();
            let after: f64 = result.sigma_tilde.iter().map(|s| s * s).sum::<f64>().sqrt();
            let ratio = if before > 0.0 { after / before } else { 1.0 };
            format!("{name}\tmatrix {rows}x{cols}\tgamma=[{lo:.4}, {hi:.4}]\tnorm_ratio={ratio:.4}")
        }
        ParamOutcome::Vector(v) => format!("{name}\tvector\tgamma={:.4}", v.gamma),
        ParamOutcome::PassThrough { reason } => format!("{name}\tpass\t{reason:?}"),
    }
}

/// Calibrates (when configured), assembles and writes the output checkpoint.
fn finish(cfg: &RunConfig, inputs: &Inputs, merged: MergedDelta) -> Result<()> {
    let (merged, outcomes) = match &cfg.calibration {
        Some(c) => {
            let filter = ParamFilter::new(&cfg.include, &cfg.exclude)?;
            let out = calibrate_store_detailed(&inputs.deltas, &merged, c, &filter)?;
            (out.merged, Some(out.outcomes))
        }
        None => (merged, None),
    };
    let weights = assemble_weights(&inputs.pretrained, &merged, cfg.lambda)?;
    let out_path = cfg
        .out_path
        .as_ref()
        .expect("output path for this subcommand");
    crate::checkpoint::write_checkpoint(&weights, out_path)?;

    if cfg.verbose {
        for (name, t) in merged.iter() {
            match outcomes.as_ref().and_then(|o| o.get(name)) {
                Some(o) => println!("{}", summarize(name, o)),
                None => println!("{name}\tmerged {:?}", t.shape()),
            }
        }
    }
    if let Some(path) = &cfg.report_path {
        let empty = Default::default();
        let outcomes = outcomes.as_ref().unwrap_or(&empty);
        let parameters = outcomes
            .iter()
            .map(|(name, outcome)| ParamEntry {
                name,
                shape: merged.get(name).map_or(&[][..], |t| t.shape()),
                outcome,
            })
            .collect();
        let report = CalibrationReport {
            schema: REPORT_SCHEMA,
            command: cfg.subcommand,
            tasks: merged.tasks(),
            method: merged.method(),
            lambda: cfg.lambda,
            calibration: cfg.calibration.as_ref(),
            parameters,
        };
        write_json(path, &report)?;
    }
    Ok(())
}

pub fn run_merge(cfg: &RunConfig) -> Result<()> {
    let inputs = load_inputs(cfg)?;
    let merged = merge_store(&inputs.deltas, &cfg.method)?;
    finish(cfg, &inputs, merged)
}

pub fn run_calibrate(cfg: &RunConfig) -> Result<()> {
    let inputs = load_inputs(cfg)?;
    let merged_path = cfg.merged_path.as_ref().expect("merged path for calibrate");
    let merged_weights = load_checkpoint(merged_path)?;
    let raw = compute_deltas(&inputs.pretrained, &merged_weights)?;
    let entries = raw
        .iter()
        .map(|(name, t)| {
            let values = t.values().iter().map(|x| x / cfg.merged_lambda).collect();
            Ok((name.to_string(), t.with_values(values)?))
        })
        .collect::<Result<_>>()?;
    let merged = MergedDelta::new(entries, cfg.method, inputs.deltas.len())?;
    finish(cfg, &inputs, merged)
}

#[derive(Serialize)]
struct AnalysisReport<'a> {
    schema: u32,
    command: CommandKind,
    tasks: usize,
    method: &'a MergeMethod,
    options: AnalysisOptions,
    parameters: Vec<AnalyzedParam>,
    skipped: Vec<SkippedParam>,
}

#[derive(Serialize)]
pub struct AnalyzedParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub rows: usize,
    pub cols: usize,
    #[serde(flatten)]
    pub report: SubspaceOverlapReport,
}

#[derive(Serialize)]
struct SkippedParam {
    name: String,
    reason: &'static str,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Flat CSV rows, one per parameter and subspace.
pub fn analysis_csv(params: &[AnalyzedParam]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for p in params {
        for e in &p.report.subspaces {
            let kept: Vec<f64> = e.retained_s().collect();
            let (min, max, mean) = if kept.is_empty() {
                (None, None, None)
            } else {
                (
                    Some(kept.iter().copied().fold(f64::INFINITY, f64::min)),
                    Some(kept.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
                    Some(kept.iter().sum::<f64>() / kept.len() as f64),
                )
            };
            let name = if p.name.contains([',', '"', '\n']) {
                format!("\"{}\"", p.name.replace('"', "\"\""))
            } else {
                p.name.clone()
            };
            let _ = writeln!(
                out,
                "{name},{},{},{},{},{},{},{},{}",
                e.r,
                e.sigma,
                e.sigma_star,
                e.gap,
                e.gamma,
                fmt_opt(min),
                fmt_opt(max),
                fmt_opt(mean)
            );
        }
    }
    out
}

pub fn run_analyze(cfg: &RunConfig) -> Result<()> {
    use rayon::prelude::*;

    let inputs = load_inputs(cfg)?;
    let merged = merge_store(&inputs.deltas, &cfg.method)?;
    let filter = ParamFilter::new(&cfg.include, &cfg.exclude)?;
    let opts = AnalysisOptions {
        basis: cfg.basis,
        alpha: cfg.analysis_alpha,
        tolerances: Default::default(),
    };

    let names: Vec<&str> = merged.iter().map(|(n, _)| n).collect();
    let analyzed = names
        .par_iter()
        .map(
            |&name| -> Result<std::result::Result<AnalyzedParam, SkippedParam>> {
                let t = merged.get(name).unwrap();
                let skip = |reason| {
                    Ok(Err(SkippedParam {
                        name: name.to_string(),
                        reason,
                    }))
                };
                if !filter.selects(name) {
                    return skip("excluded");
                }
                if t.values().is_empty() {
                    return skip("empty");
                }
                // Vectors are analysed as 1 x n matrices, which reproduces the vector rule.
                let as_matrix = |d: &crate::checkpoint::DeltaTensor| match d.ndim() {
                    0 => None,
                    1 => Some(Matrix::new(1, d.values().len(), d.values().to_vec()).unwrap()),
                    _ => d.unfold(),
                };
                let Some(merged_mat) = as_matrix(t) else {
                    return skip("scalar");
                };
                let tasks: Vec<Matrix> = inputs
                    .deltas
                    .iter()
                    .map(|d| as_matrix(d.get(name).unwrap()).unwrap())
                    .collect();
                let run = || -> Result<SubspaceOverlapReport> {
                    let decomp = svd(&merged_mat)?;
                    gap_report(&decomp, &tasks, &opts)
                };
                let report = run().map_err(|e| e.in_parameter(name))?;
                Ok(Ok(AnalyzedParam {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    rows: merged_mat.rows(),
                    cols: merged_mat.cols(),
                    report,
                }))
            },
        )
        .collect::<Result<Vec<_>>>()?;

    let mut parameters = Vec::new();
    let mut skipped = Vec::new();
    for entry in analyzed {
        match entry {
            Ok(p) => parameters.push(p),
            Err(s) => skipped.push(s),
        }
    }

    if cfg.verbose {
        for p in &parameters {
            let max_gap = p
                .report
                .subspaces
                .iter()
                .map(|e| e.gap)
                .fold(f64::NEG_INFINITY, f64::max);
            println!("{}\t{}x{}\tmax_gap={max_gap:.6}", p.name, p.rows, p.cols);
        }
    }

    let csv = analysis_csv(&parameters);
    let report = AnalysisReport {
        schema: REPORT_SCHEMA,
        command: CommandKind::Analyze,
        tasks: merged.tasks(),
        method: merged.method(),
        options: opts,
        parameters,
        skipped,
    };
    write_json(
        cfg.report_path.as_ref().expect("report path for analyze"),
        &report,
    )?;
    if let Some(path) = &cfg.csv_path {
        write_atomic(path, csv.as_bytes())?;
    }
    Ok(())
}
