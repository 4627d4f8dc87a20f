//! Annealed quasi-Newton fitting of smoothed PWA models.
//!
//! [`fit`] minimizes the smoothed least-squares criterion for a halving
//! sequence of smoothing parameters `mu_0 > mu_1 > ... > mu`, warm-starting
//! each stage from the previous optimum. A stage that fails (no convergence
//! within the step budget, non-finite values, line-search breakdown or
//! parameters escaping the box `[-1e4, 1e4]`) restarts the whole schedule
//! from a fresh random point.
//!
//! The first row of part 2 is held at zero during optimization, which removes
//! the flat direction `(part1 + h, part2 + h)` of the difference-of-convex
//! parameterization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{ParamLayout, PwaModel};
use crate::objective::{empirical_norm, Criterion, Dataset};
use crate::simulate::derive_seed;
use crate::smoothing::{Prox, SmoothingSpec};

/// Parameters leaving this box count as a numerical failure.
pub const PARAM_BOX: f64 = 1e4;

/// Settings for [`fit`], [`fit_pool`] and [`nelder_mead_fit`].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FitConfig {
    /// Target smoothing parameter.
    pub mu: f64,
    /// Convergence tolerance of each quasi-Newton stage.
    pub tolerance: f64,
    /// Initial parameters are drawn uniformly from `[-r, r]`.
    pub init_radius: f64,
    /// Step budget of one quasi-Newton stage.
    pub max_newton_steps: usize,
    /// Fresh random restarts allowed after the first attempt.
    pub max_restarts: usize,
    /// Independent fits per pool; the best empirical norm wins.
    pub restarts_pool: usize,
    pub seed: u64,
    /// The schedule starts at the first `2^m mu` exceeding this value.
    pub anneal_start: f64,
    /// Iteration cap for the Nelder-Mead baseline.
    pub nm_max_iter: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            mu: 0.1,
            tolerance: 1e-5,
            init_radius: 1.0,
            max_newton_steps: 1000,
            max_restarts: 50,
            restarts_pool: 10,
            seed: 0,
            anneal_start: 1.0,
            nm_max_iter: 5000,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(invalid(format!("{name} must be positive and finite, got {v}")))
            }
        };
        positive("mu", self.mu)?;
        positive("tolerance", self.tolerance)?;
        positive("init_radius", self.init_radius)?;
        positive("anneal_start", self.anneal_start)?;
        if self.max_newton_steps == 0 || self.restarts_pool == 0 || self.nm_max_iter == 0 {
            return Err(invalid("step budgets and the pool size must be >= 1"));
        }
        Ok(())
    }
}

/// One stage of the annealing schedule.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AnnealStage {
    pub mu: f64,
    pub objective: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub enum Method {
    #[serde(rename = "smoothed")]
    Smoothed,
    #[serde(rename = "nelder-mead")]
    NelderMead,
}

/// Outcome of a fit.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FitResult {
    pub method: Method,
    pub prox: Prox,
    pub mu: f64,
    /// Parameters in [`ParamLayout`] order.
    pub theta_hat: Vec<f64>,
    /// Normalized model (zero first row of part 2).
    pub model: PwaModel,
    /// Criterion at `mu` (unsmoothed criterion for Nelder-Mead).
    pub objective_value: f64,
    pub empirical_norm: f64,
    pub anneal_trace: Vec<AnnealStage>,
    pub restarts_used: usize,
    pub converged: bool,
}

/// `mu_m = 2^(m0 - m) mu` for `m = 0..=m0`, with `m0` the smallest integer
/// such that `2^m0 mu > start`.
pub fn anneal_schedule(mu: f64, start: f64) -> Vec<f64> {
    let mut m0 = 0i32;
    while 2f64.powi(m0) * mu <= start {
        m0 += 1;
    }
    (0..=m0).map(|m| 2f64.powi(m0 - m) * mu).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Converged,
    MaxSteps,
    LineSearchFailed,
    NonFinite,
    OutOfBox,
}

#[derive(Debug)]
struct Minimum {
    x: Vec<f64>,
    f: f64,
    steps: usize,
    status: Status,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// BFGS with inverse-Hessian updates and Armijo backtracking.
///
/// Stops when both the gradient and the last step are below `tol` in the
/// max-norm. Every accepted step strictly decreases `f`.
fn bfgs<F>(mut objective: F, x0: Vec<f64>, tol: f64, max_steps: usize) -> Minimum
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    const C1: f64 = 1e-4;
    const MAX_HALVINGS: usize = 60;

    let p = x0.len();
    let mut x = x0;
    let mut g = vec![0.0; p];
    let mut f = objective(&x, &mut g);
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Minimum { x, f, steps: 0, status: Status::NonFinite };
    }
    if inf_norm(&g) < tol {
        return Minimum { x, f, steps: 0, status: Status::Converged };
    }

    // row-major inverse Hessian approximation
    let mut h = identity(p);
    let mut fresh_h = true;
    let mut dir = vec![0.0; p];
    let mut x_new = vec![0.0; p];
    let mut g_new = vec![0.0; p];
    let mut s = vec![0.0; p];
    let mut y = vec![0.0; p];
    let mut hy = vec![0.0; p];

    for step in 1..=max_steps {
        for i in 0..p {
            dir[i] = -dot(&h[i * p..(i + 1) * p], &g);
        }
        let mut slope = dot(&g, &dir);
        if slope >= 0.0 {
            // lost descent; fall back to steepest descent
            h = identity(p);
            fresh_h = true;
            for (d, gi) in dir.iter_mut().zip(&g) {
                *d = -gi;
            }
            slope = dot(&g, &dir);
        }

        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            for i in 0..p {
                x_new[i] = x[i] + alpha * dir[i];
            }
            let f_new = objective(&x_new, &mut g_new);
            if f_new.is_finite() && f_new <= f + C1 * alpha * slope && f_new < f {
                accepted = Some(f_new);
                break;
            }
            alpha *= 0.5;
        }
        let Some(f_new) = accepted else {
            if !fresh_h {
                h = identity(p);
                fresh_h = true;
                continue;
            }
            // no representable decrease left at a stationary point
            let status = if inf_norm(&g) < tol { Status::Converged } else { Status::LineSearchFailed };
            return Minimum { x, f, steps: step, status };
        };
        if g_new.iter().any(|v| !v.is_finite()) {
            return Minimum { x: x_new, f: f_new, steps: step, status: Status::NonFinite };
        }
        if inf_norm(&x_new) > PARAM_BOX {
            return Minimum { x: x_new, f: f_new, steps: step, status: Status::OutOfBox };
        }

        for i in 0..p {
            s[i] = x_new[i] - x[i];
            y[i] = g_new[i] - g[i];
        }
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut g, &mut g_new);
        f = f_new;

        if inf_norm(&g) < tol && inf_norm(&s) < tol {
            return Minimum { x, f, steps: step, status: Status::Converged };
        }

        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if fresh_h {
                // Shanno-Phua scaling of the initial approximation
                let scale = sy / dot(&y, &y);
                for i in 0..p {
                    h[i * p + i] = scale;
                }
                fresh_h = false;
            }
            for i in 0..p {
                hy[i] = dot(&h[i * p..(i + 1) * p], &y);
            }
            let yhy = dot(&y, &hy);
            let rho = 1.0 / sy;
            let coef = (1.0 + rho * yhy) * rho;
            for i in 0..p {
                for j in 0..p {
                    h[i * p + j] += coef * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
                }
            }
        }
    }
    Minimum { x, f, steps: max_steps, status: Status::MaxSteps }
}

fn identity(p: usize) -> Vec<f64> {
    let mut h = vec![0.0; p * p];
    for i in 0..p {
        h[i * p + i] = 1.0;
    }
    h
}

/// Free coordinates of the parameter vector: everything except the pinned
/// first row of part 2.
struct FreeParams {
    layout: ParamLayout,
    free: Vec<usize>,
}

impl FreeParams {
    fn new(layout: ParamLayout) -> Self {
        let pinned = layout.pinned_indices();
        let free = (0..layout.len()).filter(|i| !pinned.contains(i)).collect();
        Self { layout, free }
    }

    fn dim(&self) -> usize {
        self.free.len()
    }

    fn expand(&self, z: &[f64], full: &mut [f64]) {
        full.fill(0.0);
        for (&i, &v) in self.free.iter().zip(z) {
            full[i] = v;
        }
    }

    fn full(&self, z: &[f64]) -> Vec<f64> {
        let mut full = vec![0.0; self.layout.len()];
        self.expand(z, &mut full);
        full
    }

    fn random(&self, rng: &mut ChaCha8Rng, radius: f64) -> Vec<f64> {
        (0..self.dim()).map(|_| rng.random_range(-radius..=radius)).collect()
    }
}

/// Smoothed criterion restricted to the free coordinates.
struct FreeObjective<'a> {
    params: &'a FreeParams,
    criterion: Criterion,
    data: &'a Dataset,
    full: Vec<f64>,
    full_grad: Vec<f64>,
}

impl<'a> FreeObjective<'a> {
    fn new(params: &'a FreeParams, spec: SmoothingSpec, data: &'a Dataset) -> Self {
        let len = params.layout.len();
        Self {
            params,
            criterion: Criterion::new(params.layout, spec),
            data,
            full: vec![0.0; len],
            full_grad: vec![0.0; len],
        }
    }

    fn value_grad(&mut self, z: &[f64], grad: &mut [f64]) -> f64 {
        self.params.expand(z, &mut self.full);
        let f = self.criterion.evaluate(&self.full, self.data, Some(&mut self.full_grad));
        for (g, &i) in grad.iter_mut().zip(&self.params.free) {
            *g = self.full_grad[i];
        }
        f
    }

    fn value(&mut self, z: &[f64]) -> f64 {
        self.params.expand(z, &mut self.full);
        self.criterion.evaluate(&self.full, self.data, None)
    }
}

fn check_fit_inputs(data: &Dataset, k1: usize, k2: usize, config: &FitConfig) -> Result<ParamLayout> {
    config.validate()?;
    if k1 == 0 {
        return Err(invalid("k1 must be >= 1"));
    }
    // k2 = 0 is the purely convex model: a single pinned zero row
    Ok(ParamLayout::new(k1, k2.max(1), data.d()))
}

fn finish(layout: ParamLayout, theta: Vec<f64>, data: &Dataset) -> Result<(Vec<f64>, PwaModel, f64)> {
    let model = PwaModel::unpack(&theta, layout.k1, layout.k2, layout.d)
        .map_err(|e| Error::Numerical(format!("fit produced an invalid model: {e}")))?
        .normalize();
    let r = empirical_norm(&model, data)?;
    Ok((model.pack(), model, r))
}

/// Annealed quasi-Newton fit of a `(k1, k2)` model.
///
/// `k2 = 0` fits the purely convex model `max_j (a_j . x + b_j)`.
pub fn fit(data: &Dataset, k1: usize, k2: usize, prox: Prox, config: &FitConfig) -> Result<FitResult> {
    let layout = check_fit_inputs(data, k1, k2, config)?;
    let params = FreeParams::new(layout);
    let schedule = anneal_schedule(config.mu, config.anneal_start);
    let target = SmoothingSpec::new(prox, config.mu)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // best failed attempt, by criterion at the target mu
    let mut incumbent: Option<(f64, Vec<f64>, Vec<AnnealStage>)> = None;

    for attempt in 0..=config.max_restarts {
        let mut z = params.random(&mut rng, config.init_radius);
        let mut trace = Vec::with_capacity(schedule.len());
        let mut ok = true;
        for &mu in &schedule {
            let spec = SmoothingSpec::new(prox, mu)?;
            let mut obj = FreeObjective::new(&params, spec, data);
            let min = bfgs(|x, g| obj.value_grad(x, g), z, config.tolerance, config.max_newton_steps);
            log::trace!("attempt {attempt} mu {mu}: {:?} after {} steps, f = {}", min.status, min.steps, min.f);
            z = min.x;
            trace.push(AnnealStage { mu, objective: min.f, steps: min.steps });
            if min.status != Status::Converged {
                ok = false;
                break;
            }
        }
        if ok {
            let objective_value = trace.last().map_or(f64::NAN, |s| s.objective);
            let (theta_hat, model, r) = finish(layout, params.full(&z), data)?;
            return Ok(FitResult {
                method: Method::Smoothed,
                prox,
                mu: config.mu,
                theta_hat,
                model,
                objective_value,
                empirical_norm: r,
                anneal_trace: trace,
                restarts_used: attempt,
                converged: true,
            });
        }
        if z.iter().all(|v| v.is_finite()) {
            let f = FreeObjective::new(&params, target, data).value(&z);
            if f.is_finite() && incumbent.as_ref().is_none_or(|(best, _, _)| f < *best) {
                incumbent = Some((f, z, trace));
            }
        }
    }

    log::warn!("no attempt converged after {} restarts", config.max_restarts);
    let (objective_value, z, trace) = incumbent.ok_or_else(|| {
        Error::Numerical("every restart diverged to non-finite parameters".into())
    })?;
    let (theta_hat, model, r) = finish(layout, params.full(&z), data)?;
    Ok(FitResult {
        method: Method::Smoothed,
        prox,
        mu: config.mu,
        theta_hat,
        model,
        objective_value,
        empirical_norm: r,
        anneal_trace: trace,
        restarts_used: config.max_restarts,
        converged: false,
    })
}

/// Seed of pool member `j`; member 0 uses the configured seed unchanged.
pub fn pool_member_seed(seed: u64, j: usize) -> u64 {
    if j == 0 {
        seed
    } else {
        derive_seed(seed, j as u64)
    }
}

fn best_of_pool(results: Vec<Result<FitResult>>) -> Result<FitResult> {
    let mut best: Option<FitResult> = None;
    let mut first_err = None;
    for r in results {
        match r {
            Ok(fit) => {
                let better = match &best {
                    None => true,
                    Some(b) => (fit.converged, -fit.empirical_norm) > (b.converged, -b.empirical_norm),
                };
                if better {
                    best = Some(fit);
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    best.ok_or_else(|| first_err.unwrap_or_else(|| invalid("empty pool")))
}

/// Runs [`fit`] `config.restarts_pool` times with independent seeds and
/// returns the converged result with the smallest empirical norm.
pub fn fit_pool(data: &Dataset, k1: usize, k2: usize, prox: Prox, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    let results: Vec<_> = (0..config.restarts_pool)
        .into_par_iter()
        .map(|j| {
            let member = FitConfig { seed: pool_member_seed(config.seed, j), ..config.clone() };
            fit(data, k1, k2, prox, &member)
        })
        .collect();
    best_of_pool(results)
}

/// Result of the generic Nelder-Mead routine.
#[derive(Debug, Clone)]
pub struct SimplexMinimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Downhill simplex minimization with reflection 1, expansion 2, contraction
/// 0.5 and shrink 0.5.
///
/// The initial simplex is `x0` plus `step` along each axis. Stops when
/// `f_max - f_min <= reltol (|f_min| + reltol)`.
pub fn nelder_mead<F>(mut f: F, x0: &[f64], step: f64, max_iter: usize, reltol: f64) -> SimplexMinimum
where
    F: FnMut(&[f64]) -> f64,
{
    const REFLECT: f64 = 1.0;
    const EXPAND: f64 = 2.0;
    const CONTRACT: f64 = 0.5;
    const SHRINK: f64 = 0.5;

    let n = x0.len();
    let mut pts: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    pts.push(x0.to_vec());
    for i in 0..n {
        let mut p = x0.to_vec();
        p[i] += step;
        pts.push(p);
    }
    let mut vals: Vec<f64> = pts.iter().map(|p| nan_to_inf(f(p))).collect();
    let mut centroid = vec![0.0; n];
    let along = |c: &[f64], w: &[f64], t: f64| -> Vec<f64> { c.iter().zip(w).map(|(ci, wi)| ci + t * (wi - ci)).collect() };

    for iter in 0..max_iter {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        pts = order.iter().map(|&i| pts[i].clone()).collect();
        vals = order.iter().map(|&i| vals[i]).collect();

        let (best, worst) = (vals[0], vals[n]);
        if worst - best <= reltol * (best.abs() + reltol) {
            return SimplexMinimum { x: pts.swap_remove(0), f: best, iterations: iter, converged: true };
        }

        centroid.fill(0.0);
        for p in &pts[..n] {
            for (c, v) in centroid.iter_mut().zip(p) {
                *c += v / n as f64;
            }
        }
        let reflected = along(&centroid, &pts[n], -REFLECT);
        let fr = nan_to_inf(f(&reflected));
        if fr < vals[0] {
            let expanded = along(&centroid, &pts[n], -EXPAND);
            let fe = nan_to_inf(f(&expanded));
            if fe < fr {
                pts[n] = expanded;
                vals[n] = fe;
            } else {
                pts[n] = reflected;
                vals[n] = fr;
            }
        } else if fr < vals[n - 1] {
            pts[n] = reflected;
            vals[n] = fr;
        } else {
            let (contracted, fc) = if fr < vals[n] {
                let c = along(&centroid, &reflected, CONTRACT);
                let fc = nan_to_inf(f(&c));
                (c, fc)
            } else {
                let c = along(&centroid, &pts[n], CONTRACT);
                let fc = nan_to_inf(f(&c));
                (c, fc)
            };
            if fc < vals[n].min(fr) {
                pts[n] = contracted;
                vals[n] = fc;
            } else {
                let best_pt = pts[0].clone();
                for i in 1..=n {
                    pts[i] = along(&best_pt, &pts[i], SHRINK);
                    vals[i] = nan_to_inf(f(&pts[i]));
                }
            }
        }
    }
    let i = (0..=n).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap_or(0);
    SimplexMinimum { x: pts.swap_remove(i), f: vals[i], iterations: max_iter, converged: false }
}

fn nan_to_inf(v: f64) -> f64 {
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

/// Gradient-free baseline: Nelder-Mead on the unsmoothed least-squares
/// criterion from the same random initialization as [`fit`].
///
/// The returned result records `mu = 0` and an empty annealing trace.
pub fn nelder_mead_fit(data: &Dataset, k1: usize, k2: usize, config: &FitConfig) -> Result<FitResult> {
    let layout = check_fit_inputs(data, k1, k2, config)?;
    let params = FreeParams::new(layout);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let z0 = params.random(&mut rng, config.init_radius);
    let mut criterion = Criterion::new(layout, SmoothingSpec::unsmoothed(Prox::SquaredError));
    let mut full = vec![0.0; layout.len()];
    let min = nelder_mead(
        |z| {
            params.expand(z, &mut full);
            criterion.evaluate(&full, data, None)
        },
        &z0,
        0.1 * config.init_radius,
        config.nm_max_iter,
        1e-8,
    );
    let (theta_hat, model, r) = finish(layout, params.full(&min.x), data)?;
    Ok(FitResult {
        method: Method::NelderMead,
        prox: Prox::SquaredError,
        mu: 0.0,
        theta_hat,
        model,
        objective_value: min.f,
        empirical_norm: r,
        anneal_trace: Vec::new(),
        restarts_used: 0,
        converged: min.converged,
    })
}

/// Best-of-pool Nelder-Mead, mirroring [`fit_pool`].
pub fn nelder_mead_pool(data: &Dataset, k1: usize, k2: usize, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    let results: Vec<_> = (0..config.restarts_pool)
        .into_par_iter()
        .map(|j| {
            let member = FitConfig { seed: pool_member_seed(config.seed, j), ..config.clone() };
            nelder_mead_fit(data, k1, k2, &member)
        })
        .collect();
    best_of_pool(results)
}
