//! The `pwafit` command line.
//!
//! Exit codes: 0 success, 2 usage or input error, 3 numerical failure
//! (including a fit that did not converge; its best incumbent is still
//! written). Each run also writes a manifest recording the arguments, the
//! library version and per-phase timings; `pwafit replay <manifest>` reruns
//! it.

use std::ffi::OsString;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::{
    compare, coverage, mu_sweep, restart_ecdf, three_planes, write_rows, CompareSettings, CoverageSettings, Experiment,
    MuSweepSettings, RestartSettings, ThreePlanesSettings,
};
use crate::inference::{
    confidence_intervals, plugin_covariance_with, smoothed_covariance_with, ConfidenceIntervals, CovarianceEstimate,
    VarianceEstimator,
};
use crate::objective::Dataset;
use crate::optimizer::{fit_pool, FitConfig, FitResult};
use crate::simulate::{generate, preset, read_csv_file, write_csv_file, Preset};
use crate::smoothing::{Prox, SmoothingSpec};

/// Version tag of every JSON document written by the CLI.
pub const SCHEMA: &str = "pwafit/v1";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "pwafit", version, about = "Fit continuous piecewise-affine regression models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Draw a dataset from a preset scenario.
    Simulate(SimulateArgs),
    /// Fit a (k1, k2) model to a CSV dataset.
    Fit(FitArgs),
    /// Covariance and confidence intervals for a two-piece convex fit.
    Ci(CiArgs),
    /// Smoothed fit against Nelder-Mead over replications.
    Compare(CompareArgs),
    /// Run a named simulation study.
    Experiment(ExperimentArgs),
    /// Rerun the command recorded in a manifest.
    Replay(ReplayArgs),
}

fn parse_preset(s: &str) -> std::result::Result<Preset, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_prox(s: &str) -> std::result::Result<Prox, String> {
    match s {
        "entropy" => Ok(Prox::Entropy),
        "sqerr" => Ok(Prox::SquaredError),
        _ => Err(format!("unknown prox {s:?}; expected entropy or sqerr")),
    }
}

fn parse_experiment(s: &str) -> std::result::Result<Experiment, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long, value_parser = parse_preset)]
    pub preset: Preset,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Override the preset sample size.
    #[arg(long)]
    pub n: Option<usize>,
    /// Override the preset noise standard deviation.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

/// Optimizer settings shared by the fitting commands.
#[derive(Debug, Clone, Args, Serialize)]
pub struct FitOptions {
    #[arg(long, default_value_t = 0.1)]
    pub mu: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    #[arg(long, default_value_t = 10)]
    pub pool: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub max_restarts: usize,
    #[arg(long, default_value_t = 1000)]
    pub max_steps: usize,
    #[arg(long, default_value_t = 1.0)]
    pub init_radius: f64,
    #[arg(long, default_value_t = 1.0)]
    pub anneal_start: f64,
}

impl FitOptions {
    fn config(&self) -> FitConfig {
        FitConfig {
            mu: self.mu,
            tolerance: self.tol,
            init_radius: self.init_radius,
            max_newton_steps: self.max_steps,
            max_restarts: self.max_restarts,
            restarts_pool: self.pool,
            seed: self.seed,
            anneal_start: self.anneal_start,
            ..FitConfig::default()
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub k1: usize,
    #[arg(long, default_value_t = 0)]
    pub k2: usize,
    #[arg(long, value_parser = parse_prox, default_value = "sqerr")]
    pub prox: Prox,
    #[command(flatten)]
    pub opts: FitOptions,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write `x1..xd,y,fitted` for every observation.
    #[arg(long)]
    pub fitted: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovarianceKind {
    /// Hard assignment of points to pieces.
    Plugin,
    /// Smoothing weights at the fit's prox and mu.
    Smoothed,
}

#[derive(Debug, Args, Serialize)]
pub struct CiArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Fit JSON written by `pwafit fit`.
    #[arg(long)]
    pub fit: PathBuf,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long, value_enum, default_value_t = CovarianceKind::Plugin)]
    pub covariance: CovarianceKind,
    /// Divide the residual sum of squares by n - p instead of n.
    #[arg(long)]
    pub dof_corrected: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct CompareArgs {
    #[arg(long, value_parser = parse_preset, default_value = "planes-d2")]
    pub preset: Preset,
    #[arg(long, default_value_t = 100)]
    pub reps: usize,
    #[command(flatten)]
    pub opts: FitOptions,
    /// Table with one row per method: `method,R_mean,time_s`.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-replication results.
    #[arg(long)]
    pub replications: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ExperimentArgs {
    /// mu-sweep, restart-ecdf, coverage or three-planes.
    #[arg(value_parser = parse_experiment)]
    pub name: Experiment,
    /// Replications (fits for restart-ecdf); defaults to the study's own.
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub pool: usize,
    /// Smoothing parameter; defaults to 0.1 (0.01 for coverage). Ignored by
    /// mu-sweep.
    #[arg(long)]
    pub mu: Option<f64>,
    /// Receives `<name>.csv`, `<name>.json` and `<name>.manifest.json`.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub phase: String,
    pub seconds: f64,
}

/// Audit record written next to every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub command: String,
    /// Arguments after the program name; replayable.
    pub argv: Vec<String>,
    pub version: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub outputs: Vec<String>,
    pub timings: Vec<PhaseTiming>,
}

struct Recorder {
    timings: Vec<PhaseTiming>,
    outputs: Vec<String>,
}

impl Recorder {
    fn new() -> Self {
        Self { timings: Vec::new(), outputs: Vec::new() }
    }

    fn phase<T>(&mut self, name: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.timings.push(PhaseTiming { phase: name.into(), seconds: start.elapsed().as_secs_f64() });
        out
    }

    fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }
}

fn manifest_path(explicit: Option<&PathBuf>, primary: &Path) -> PathBuf {
    explicit.cloned().unwrap_or_else(|| primary.with_extension("manifest.json"))
}

fn file_name(p: &Path) -> String {
    p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

#[derive(Serialize, Deserialize)]
struct FitDocument {
    schema: String,
    manifest: String,
    #[serde(flatten)]
    fit: FitResult,
}

#[derive(Serialize)]
struct CiDocument<'a> {
    schema: &'static str,
    manifest: String,
    covariance_kind: CovarianceKind,
    covariance: &'a CovarianceEstimate,
    intervals: &'a ConfidenceIntervals,
}

#[derive(Serialize)]
struct Summary<'a> {
    schema: &'static str,
    manifest: String,
    experiment: &'a str,
    settings: serde_json::Value,
    #[serde(flatten)]
    result: serde_json::Value,
}

/// What a command produced, for the exit status.
enum Outcome {
    Done,
    NotConverged,
}

fn map_error(e: &Error) -> i32 {
    match e {
        Error::Numerical(_) | Error::EmptyPiece { .. } => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. Diagnostics go to standard error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return if code == 0 { EXIT_OK } else { EXIT_USAGE };
        }
    };
    let argv: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(cli.command, argv) {
        Ok(Outcome::Done) => EXIT_OK,
        Ok(Outcome::NotConverged) => {
            eprintln!("pwafit: no pool member converged; best incumbent written");
            EXIT_NUMERICAL
        }
        Err(e) => {
            eprintln!("pwafit: {e}");
            map_error(&e)
        }
    }
}

fn dispatch(command: Command, argv: Vec<String>) -> Result<Outcome> {
    let name = match &command {
        Command::Simulate(_) => "simulate",
        Command::Fit(_) => "fit",
        Command::Ci(_) => "ci",
        Command::Compare(_) => "compare",
        Command::Experiment(_) => "experiment",
        Command::Replay(_) => "replay",
    };
    let config = serde_json::to_value(&command)?;
    let manifest = |seed: Option<u64>, rec: Recorder| RunManifest {
        schema: SCHEMA.into(),
        command: name.into(),
        argv: argv.clone(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed,
        config: config.clone(),
        outputs: rec.outputs,
        timings: rec.timings,
    };
    match command {
        Command::Simulate(a) => {
            let mut rec = Recorder::new();
            let mut scenario = preset(a.preset, a.seed)?;
            if let Some(n) = a.n {
                scenario.n = n;
            }
            if let Some(sd) = a.noise {
                scenario.noise_sd = sd;
            }
            let data = rec.phase("generate", || generate(&scenario))?;
            rec.phase("write", || write_csv_file(&data, &a.out))?;
            rec.output(&a.out);
            let mpath = manifest_path(a.manifest.as_ref(), &a.out);
            write_json(&manifest(Some(a.seed), rec), &mpath)?;
            Ok(Outcome::Done)
        }
        Command::Fit(a) => {
            let mut rec = Recorder::new();
            let data = rec.phase("read", || read_csv_file(&a.input))?;
            let config = a.opts.config();
            let res = rec.phase("fit", || fit_pool(&data, a.k1, a.k2, a.prox, &config))?;
            let mpath = manifest_path(a.manifest.as_ref(), &a.out);
            rec.phase("write", || -> Result<()> {
                write_json(&FitDocument { schema: SCHEMA.into(), manifest: file_name(&mpath), fit: res.clone() }, &a.out)?;
                if let Some(path) = &a.fitted {
                    write_fitted(&data, &res, path)?;
                }
                Ok(())
            })?;
            rec.output(&a.out);
            if let Some(path) = &a.fitted {
                rec.output(path);
            }
            write_json(&manifest(Some(a.opts.seed), rec), &mpath)?;
            Ok(if res.converged { Outcome::Done } else { Outcome::NotConverged })
        }
        Command::Ci(a) => {
            let mut rec = Recorder::new();
            let data = rec.phase("read", || read_csv_file(&a.input))?;
            let doc: FitDocument = serde_json::from_slice(&fs::read(&a.fit)?)?;
            let estimator = if a.dof_corrected { VarianceEstimator::DofCorrected } else { VarianceEstimator::Mle };
            let cov = rec.phase("covariance", || match a.covariance {
                CovarianceKind::Plugin => plugin_covariance_with(&doc.fit.model, &data, estimator),
                CovarianceKind::Smoothed => {
                    let spec = SmoothingSpec::new(doc.fit.prox, doc.fit.mu)?;
                    smoothed_covariance_with(&doc.fit.model, &spec, &data, estimator)
                }
            })?;
            let intervals = confidence_intervals(&doc.fit, &cov, a.level)?;
            let mpath = manifest_path(a.manifest.as_ref(), &a.out);
            let out = CiDocument {
                schema: SCHEMA,
                manifest: file_name(&mpath),
                covariance_kind: a.covariance,
                covariance: &cov,
                intervals: &intervals,
            };
            rec.phase("write", || write_json(&out, &a.out))?;
            rec.output(&a.out);
            write_json(&manifest(None, rec), &mpath)?;
            Ok(Outcome::Done)
        }
        Command::Compare(a) => {
            let mut rec = Recorder::new();
            let settings = CompareSettings { preset: a.preset, reps: a.reps, seed: a.opts.seed, fit: a.opts.config() };
            let report = rec.phase("compare", || compare(&settings))?;
            write_rows(&report.rows, create(&a.out)?)?;
            rec.output(&a.out);
            if let Some(path) = &a.replications {
                write_rows(&report.replications, create(path)?)?;
                rec.output(path);
            }
            let mpath = manifest_path(a.manifest.as_ref(), &a.out);
            write_json(&manifest(Some(a.opts.seed), rec), &mpath)?;
            Ok(Outcome::Done)
        }
        Command::Experiment(a) => {
            let rec = run_experiment(&a)?;
            let mpath = a.out_dir.join(format!("{}.manifest.json", a.name.name()));
            write_json(&manifest(Some(a.seed), rec), &mpath)?;
            Ok(Outcome::Done)
        }
        Command::Replay(a) => {
            let m: RunManifest = serde_json::from_slice(&fs::read(&a.manifest)?)?;
            if m.schema != SCHEMA {
                return Err(crate::error::invalid(format!("unsupported manifest schema {:?}", m.schema)));
            }
            if m.argv.first().map(String::as_str) == Some("replay") {
                return Err(crate::error::invalid("a manifest cannot replay a replay"));
            }
            let args = std::iter::once("pwafit".to_string()).chain(m.argv);
            match run(args) {
                EXIT_OK => Ok(Outcome::Done),
                EXIT_NUMERICAL => Err(Error::Numerical("replayed command failed".into())),
                _ => Err(crate::error::invalid("replayed command failed")),
            }
        }
    }
}

fn write_fitted(data: &Dataset, res: &FitResult, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(create(path)?);
    let mut header: Vec<String> = (1..=data.d()).map(|i| format!("x{i}")).collect();
    header.extend(["y".to_string(), "fitted".to_string()]);
    let csv_err = |e: csv::Error| Error::Csv { row: 0, column: 0, message: e.to_string() };
    w.write_record(&header).map_err(csv_err)?;
    for (x, y) in data.iter() {
        let fitted = res.model.evaluate(x)?;
        let rec: Vec<String> = x.iter().chain([y, fitted].iter()).map(|v| format!("{v:?}")).collect();
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn run_experiment(a: &ExperimentArgs) -> Result<Recorder> {
    let mut rec = Recorder::new();
    fs::create_dir_all(&a.out_dir)?;
    let name = a.name.name();
    let csv_path = a.out_dir.join(format!("{name}.csv"));
    let json_path = a.out_dir.join(format!("{name}.json"));
    let manifest = format!("{name}.manifest.json");
    let fit = |default_mu: f64| FitConfig { mu: a.mu.unwrap_or(default_mu), restarts_pool: a.pool, ..FitConfig::default() };
    let summary = |settings: serde_json::Value, result: serde_json::Value| -> Result<()> {
        let doc = Summary { schema: SCHEMA, manifest: manifest.clone(), experiment: name, settings, result };
        write_json(&doc, &json_path)
    };

    match a.name {
        Experiment::MuSweep => {
            let d = MuSweepSettings::default();
            let s = MuSweepSettings { reps: a.reps.unwrap_or(d.reps), seed: a.seed, fit: fit(0.1), ..d };
            let rows = rec.phase("mu-sweep", || mu_sweep(&s))?;
            write_rows(&rows, create(&csv_path)?)?;
            let dist: Vec<f64> = rows.iter().map(|r| r.mean_distance).collect();
            let inversions = dist.windows(2).filter(|w| w[1] > w[0]).count();
            summary(serde_json::to_value(&s)?, serde_json::json!({ "mean_distance": dist, "inversions": inversions }))?;
        }
        Experiment::RestartEcdf => {
            let d = RestartSettings::default();
            let s = RestartSettings { fits: a.reps.unwrap_or(d.fits), seed: a.seed, fit: fit(0.1), ..d };
            let report = rec.phase("restart-ecdf", || restart_ecdf(&s))?;
            write_rows(&report.ecdf, create(&csv_path)?)?;
            summary(
                serde_json::to_value(&s)?,
                serde_json::json!({
                    "fraction_below": report.fraction_below,
                    "threshold": report.threshold,
                    "restarts_total": report.restarts_total,
                    "unconverged": report.unconverged,
                }),
            )?;
        }
        Experiment::Coverage => {
            let d = CoverageSettings::default();
            let s = CoverageSettings { reps: a.reps.unwrap_or(d.reps), seed: a.seed, fit: fit(0.01), ..d };
            let report = rec.phase("coverage", || coverage(&s))?;
            write_rows(&report.rows, create(&csv_path)?)?;
            summary(serde_json::to_value(&s)?, serde_json::to_value(&report)?)?;
        }
        Experiment::ThreePlanes => {
            let s = ThreePlanesSettings { seed: a.seed, fit: fit(0.1) };
            let report = rec.phase("three-planes", || three_planes(&s))?;
            write_rows(&report.points, create(&csv_path)?)?;
            summary(
                serde_json::to_value(&s)?,
                serde_json::json!({
                    "fit": report.fit,
                    "truth": report.truth,
                    "distance": report.distance,
                }),
            )?;
        }
    }
    rec.output(&csv_path);
    rec.output(&json_path);
    Ok(rec)
}
