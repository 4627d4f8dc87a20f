//! Simulation studies: method comparison, smoothing-parameter sweep, restart
//! reliability, interval coverage and a three-plane fit.
//!
//! Every study is a pure function of its settings. Replications run in
//! parallel and are gathered in replication order, so reports (apart from
//! the wall-clock columns) are reproducible bit for bit.

use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::inference::{confidence_intervals_for, hinge_fit_1d, plugin_covariance, ConfidenceIntervals};
use crate::model::{align_to, PwaModel};
use crate::objective::Dataset;
use crate::optimizer::{fit, fit_pool, nelder_mead_pool, FitConfig, FitResult};
use crate::simulate::{derive_seed, generate, preset, Preset, Scenario};
use crate::smoothing::Prox;

/// Named studies runnable from the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    MuSweep,
    RestartEcdf,
    Coverage,
    ThreePlanes,
}

impl Experiment {
    pub const ALL: [Experiment; 4] = [Experiment::MuSweep, Experiment::RestartEcdf, Experiment::Coverage, Experiment::ThreePlanes];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::MuSweep => "mu-sweep",
            Experiment::RestartEcdf => "restart-ecdf",
            Experiment::Coverage => "coverage",
            Experiment::ThreePlanes => "three-planes",
        }
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL.into_iter().find(|e| e.name() == s).ok_or_else(|| {
            let names: Vec<_> = Experiment::ALL.iter().map(|e| e.name()).collect();
            invalid(format!("unknown experiment {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

/// Seeds of replication `rep`: `(data, fit)`.
fn rep_seeds(seed: u64, rep: usize) -> (u64, u64) {
    (derive_seed(seed, 2 * rep as u64), derive_seed(seed, 2 * rep as u64 + 1))
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Writes rows with a header through serde.
pub fn write_rows<W: Write, R: Serialize>(rows: &[R], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Csv { row: 0, column: 0, message: e.to_string() })?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareSettings {
    pub preset: Preset,
    pub reps: usize,
    pub seed: u64,
    pub fit: FitConfig,
}

impl CompareSettings {
    pub fn new(preset: Preset) -> Self {
        Self { preset, reps: 100, seed: 0, fit: FitConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub method: String,
    #[serde(rename = "R_mean")]
    pub r_mean: f64,
    pub time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRep {
    pub rep: usize,
    pub method: String,
    #[serde(rename = "R")]
    pub r: f64,
    pub converged: bool,
    pub time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
    pub replications: Vec<CompareRep>,
}

/// Smoothed fit against Nelder-Mead on fresh draws of `preset`, both as
/// best-of-pool. Reports mean empirical norm and mean wall time per method.
pub fn compare(settings: &CompareSettings) -> Result<CompareReport> {
    settings.fit.validate()?;
    if settings.reps == 0 {
        return Err(invalid("compare needs reps >= 1"));
    }
    let (k1, k2) = settings.preset.pieces();
    let reps: Vec<[CompareRep; 2]> = (0..settings.reps)
        .into_par_iter()
        .map(|rep| {
            let (data_seed, fit_seed) = rep_seeds(settings.seed, rep);
            let data = generate(&preset(settings.preset, data_seed)?)?;
            let cfg = FitConfig { seed: fit_seed, ..settings.fit.clone() };
            let (nm, nm_t) = timed(|| nelder_mead_pool(&data, k1, k2, &cfg));
            let (sm, sm_t) = timed(|| fit_pool(&data, k1, k2, Prox::SquaredError, &cfg));
            let (nm, sm) = (nm?, sm?);
            let rec = |method: &str, f: &FitResult, t| CompareRep { rep, method: method.into(), r: f.empirical_norm, converged: f.converged, time_s: t };
            Ok([rec("nelder-mead", &nm, nm_t), rec("smoothed", &sm, sm_t)])
        })
        .collect::<Result<_>>()?;
    let replications: Vec<CompareRep> = reps.into_iter().flatten().collect();
    let rows = ["nelder-mead", "smoothed"]
        .iter()
        .map(|m| {
            let own = || replications.iter().filter(move |r| r.method == *m);
            CompareRow { method: m.to_string(), r_mean: mean(own().map(|r| r.r)), time_s: mean(own().map(|r| r.time_s)) }
        })
        .collect();
    Ok(CompareReport { rows, replications })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuSweepSettings {
    /// Smoothing parameters `mu = n^-e`.
    pub exponents: Vec<f64>,
    pub reps: usize,
    pub seed: u64,
    pub fit: FitConfig,
}

impl Default for MuSweepSettings {
    fn default() -> Self {
        Self {
            exponents: (1..=10).map(|i| f64::from(i) / 10.0).collect(),
            reps: 100,
            seed: 0,
            fit: FitConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuSweepRow {
    pub e: f64,
    pub mu: f64,
    pub mean_distance: f64,
    pub mean_time_s: f64,
}

/// Fits the fixed `mu-study` plane pair with `mu = n^-e` for each exponent.
/// Replication `r` reuses the same data and starting points for every `e`.
pub fn mu_sweep(settings: &MuSweepSettings) -> Result<Vec<MuSweepRow>> {
    if settings.reps == 0 || settings.exponents.is_empty() {
        return Err(invalid("mu-sweep needs reps >= 1 and at least one exponent"));
    }
    let scenario = preset(Preset::MuStudy, 0)?;
    let truth = scenario.model.clone();
    let (k1, k2) = Preset::MuStudy.pieces();
    let data: Vec<(Dataset, u64)> = (0..settings.reps)
        .map(|rep| {
            let (data_seed, fit_seed) = rep_seeds(settings.seed, rep);
            Ok((generate(&scenario.clone().with_seed(data_seed))?, fit_seed))
        })
        .collect::<Result<_>>()?;
    settings
        .exponents
        .iter()
        .map(|&e| {
            let mu = (scenario.n as f64).powf(-e);
            let cfg = FitConfig { mu, ..settings.fit.clone() };
            let runs: Vec<(f64, f64)> = data
                .par_iter()
                .map(|(d, fit_seed)| {
                    let (res, t) = timed(|| fit_pool(d, k1, k2, Prox::SquaredError, &FitConfig { seed: *fit_seed, ..cfg.clone() }));
                    Ok((align_to(&res?.model, &truth)?.1, t))
                })
                .collect::<Result<_>>()?;
            Ok(MuSweepRow {
                e,
                mu,
                mean_distance: mean(runs.iter().map(|r| r.0)),
                mean_time_s: mean(runs.iter().map(|r| r.1)),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartSettings {
    pub fits: usize,
    pub seed: u64,
    pub threshold: f64,
    pub fit: FitConfig,
}

impl Default for RestartSettings {
    fn default() -> Self {
        Self { fits: 200, seed: 0, threshold: 0.1, fit: FitConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcdfPoint {
    pub distance: f64,
    pub ecdf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartReport {
    /// Sorted distances with their empirical CDF.
    pub ecdf: Vec<EcdfPoint>,
    pub fraction_below: f64,
    pub threshold: f64,
    pub restarts_total: usize,
    pub unconverged: usize,
}

/// Independent single fits (no pool) of the broken stick, each on fresh data;
/// records the distance of every estimate to the generating parameters.
pub fn restart_ecdf(settings: &RestartSettings) -> Result<RestartReport> {
    if settings.fits == 0 {
        return Err(invalid("restart-ecdf needs fits >= 1"));
    }
    let (k1, k2) = Preset::BrokenStick200.pieces();
    let runs: Vec<(f64, usize, bool)> = (0..settings.fits)
        .into_par_iter()
        .map(|rep| {
            let (data_seed, fit_seed) = rep_seeds(settings.seed, rep);
            let scenario = preset(Preset::BrokenStick200, data_seed)?;
            let data = generate(&scenario)?;
            let res = fit(&data, k1, k2, Prox::SquaredError, &FitConfig { seed: fit_seed, ..settings.fit.clone() })?;
            Ok((align_to(&res.model, &scenario.model)?.1, res.restarts_used, res.converged))
        })
        .collect::<Result<_>>()?;
    let mut dist: Vec<f64> = runs.iter().map(|r| r.0).collect();
    dist.sort_by(f64::total_cmp);
    let n = dist.len() as f64;
    let ecdf = dist.iter().enumerate().map(|(i, &d)| EcdfPoint { distance: d, ecdf: (i + 1) as f64 / n }).collect();
    Ok(RestartReport {
        ecdf,
        fraction_below: dist.iter().filter(|&&d| d < settings.threshold).count() as f64 / n,
        threshold: settings.threshold,
        restarts_total: runs.iter().map(|r| r.1).sum(),
        unconverged: runs.iter().filter(|r| !r.2).count(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageSettings {
    pub reps: usize,
    pub seed: u64,
    pub level: f64,
    /// Change-point grid of the hinge baseline.
    pub grid: usize,
    pub fit: FitConfig,
}

impl Default for CoverageSettings {
    fn default() -> Self {
        Self { reps: 200, seed: 0, level: 0.95, grid: 1000, fit: FitConfig { mu: 0.01, ..FitConfig::default() } }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub method: String,
    /// Parameter name, or `all` for simultaneous coverage.
    pub parameter: String,
    pub truth: f64,
    pub coverage: f64,
    pub mean_length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub rows: Vec<CoverageRow>,
    /// Replications without intervals (empty or non-convex fit), per method.
    pub failures: Vec<(String, usize)>,
}

/// Normal-interval coverage for the broken stick (`n = 200`). Each
/// replication draws one dataset, fits it with the smoothed estimator (best
/// of pool) and with the hinge grid search, and builds plug-in intervals for
/// both. A replication without intervals counts as not covering.
pub fn coverage(settings: &CoverageSettings) -> Result<CoverageReport> {
    if settings.reps == 0 {
        return Err(invalid("coverage needs reps >= 1"));
    }
    let truth = preset(Preset::BrokenStick200, 0)?.model;
    let (k1, k2) = Preset::BrokenStick200.pieces();
    let p = truth.k1() * (truth.d() + 1);
    let theta0 = truth.pack();

    let intervals = |model: &PwaModel, data: &Dataset| -> Option<ConfidenceIntervals> {
        let aligned = align_to(model, &truth).ok()?.0;
        let cov = plugin_covariance(&aligned, data).ok()?;
        confidence_intervals_for(&aligned, &cov, settings.level).ok()
    };

    let per_rep: Vec<[Option<ConfidenceIntervals>; 2]> = (0..settings.reps)
        .into_par_iter()
        .map(|rep| {
            let (data_seed, fit_seed) = rep_seeds(settings.seed, rep);
            let data = generate(&preset(Preset::BrokenStick200, data_seed)?)?;
            let sm = fit_pool(&data, k1, k2, Prox::SquaredError, &FitConfig { seed: fit_seed, ..settings.fit.clone() })?;
            let hinge = hinge_fit_1d(&data, settings.grid)?.to_pwa();
            let hinge = (hinge.layout() == truth.layout()).then_some(hinge);
            Ok([intervals(&sm.model, &data), hinge.and_then(|h| intervals(&h, &data))])
        })
        .collect::<Result<_>>()?;

    let names: Vec<String> = (0..p).map(|i| truth.layout().param_name(i)).collect();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (m, method) in ["smoothed", "hinge"].iter().enumerate() {
        let ok: Vec<&ConfidenceIntervals> = per_rep.iter().filter_map(|r| r[m].as_ref()).collect();
        let reps = settings.reps as f64;
        for i in 0..p {
            rows.push(CoverageRow {
                method: method.to_string(),
                parameter: names[i].clone(),
                truth: theta0[i],
                coverage: ok.iter().filter(|c| c.intervals[i].contains(theta0[i])).count() as f64 / reps,
                mean_length: mean(ok.iter().map(|c| c.intervals[i].length())),
            });
        }
        rows.push(CoverageRow {
            method: method.to_string(),
            parameter: "all".into(),
            truth: f64::NAN,
            coverage: ok.iter().filter(|c| (0..p).all(|i| c.intervals[i].contains(theta0[i]))).count() as f64 / reps,
            mean_length: f64::NAN,
        });
        failures.push((method.to_string(), settings.reps - ok.len()));
    }
    Ok(CoverageReport { rows, failures })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThreePlanesSettings {
    pub seed: u64,
    pub fit: FitConfig,
}

impl Default for ThreePlanesSettings {
    fn default() -> Self {
        Self { seed: 0, fit: FitConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfacePoint {
    pub x1: f64,
    pub x2: f64,
    pub y: f64,
    pub fitted: f64,
    pub truth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThreePlanesReport {
    pub fit: FitResult,
    pub truth: PwaModel,
    pub distance: f64,
    pub points: Vec<SurfacePoint>,
}

/// Fits a three-piece convex model to the `three-planes` preset.
pub fn three_planes(settings: &ThreePlanesSettings) -> Result<ThreePlanesReport> {
    let (data_seed, fit_seed) = rep_seeds(settings.seed, 0);
    let scenario: Scenario = preset(Preset::ThreePlanes, data_seed)?;
    let data = generate(&scenario)?;
    let (k1, k2) = Preset::ThreePlanes.pieces();
    let res = fit_pool(&data, k1, k2, Prox::SquaredError, &FitConfig { seed: fit_seed, ..settings.fit.clone() })?;
    let (aligned, distance) = align_to(&res.model, &scenario.model)?;
    let points = data
        .iter()
        .map(|(x, y)| SurfacePoint {
            x1: x[0],
            x2: x[1],
            y,
            fitted: aligned.eval_unchecked(x),
            truth: scenario.model.eval_unchecked(x),
        })
        .collect();
    Ok(ThreePlanesReport { fit: res, truth: scenario.model, distance, points })
}
