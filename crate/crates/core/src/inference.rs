//! Asymptotic covariance estimates, normal confidence intervals and the
//! hinge-model baseline for two-piece fits.
//!
//! The covariance routines expect a convex model (`part2` trivial). Points
//! are assigned to the piece attaining the maximum, ties going to the lowest
//! index. With `M = (1/n) sum psi psi^T`, where `psi` stacks `w_j (x, 1)` over
//! pieces, the estimates are
//!
//! ```text
//! V = 2 M,   W = 4 sigma^2 M,   C = V^+ W V^+
//! ```
//!
//! with `w` the hard piece indicators ([`plugin_covariance`]) or the
//! smoothing weights ([`smoothed_covariance`]).

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{invalid, Error, Result};
use crate::model::{MaxAffine, ParamLayout, PwaModel};
use crate::objective::Dataset;
use crate::optimizer::FitResult;
use crate::smoothing::{smooth_value, smooth_weights, SmoothingSpec};

/// Normalization of the residual variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum VarianceEstimator {
    /// `sum r^2 / n`.
    #[default]
    Mle,
    /// `sum r^2 / (n - p)`.
    DofCorrected,
}

/// Covariance of the part-1 parameters of a convex fit, in [`ParamLayout`]
/// order. Matrices are stored row by row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceEstimate {
    pub param_names: Vec<String>,
    /// Piece owning each parameter.
    pub owners: Vec<usize>,
    pub v: Vec<Vec<f64>>,
    pub w: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub sigma2_hat: f64,
    /// Points assigned to each piece.
    pub segment_counts: Vec<usize>,
}

impl CovarianceEstimate {
    pub fn dim(&self) -> usize {
        self.param_names.len()
    }
}

struct Convex<'a> {
    part: &'a MaxAffine,
    /// `index[j][l]`: position of coordinate `l` of `(a_j, b_j)`.
    index: Vec<Vec<usize>>,
    names: Vec<String>,
    owners: Vec<usize>,
}

impl<'a> Convex<'a> {
    fn new(model: &'a PwaModel, data: &Dataset) -> Result<Self> {
        if !model.part2().is_trivial() {
            return Err(invalid("covariance estimates need a convex model (part 2 identically zero)"));
        }
        if model.d() != data.d() {
            return Err(Error::DimensionMismatch { expected: model.d(), got: data.d() });
        }
        let part = model.part1();
        let (k, d) = (part.k(), part.d());
        let layout = ParamLayout::new(k, 1, d);
        let index: Vec<Vec<usize>> = (0..k)
            .map(|j| (0..=d).map(|l| if l < d { layout.slope_index(0, j, l) } else { layout.intercept_index(0, j) }).collect())
            .collect();
        let p = k * (d + 1);
        let names = (0..p).map(|i| layout.param_name(i)).collect();
        let mut owners = vec![0; p];
        for (j, idx) in index.iter().enumerate() {
            for &i in idx {
                owners[i] = j;
            }
        }
        Ok(Self { part, index, names, owners })
    }

    fn p(&self) -> usize {
        self.names.len()
    }

    fn counts(&self, data: &Dataset) -> Vec<usize> {
        let mut counts = vec![0; self.part.k()];
        for (x, _) in data.iter() {
            counts[self.part.argmax(x)] += 1;
        }
        counts
    }

    /// `(1/n) sum psi psi^T` for per-point piece weights `weights(x)`.
    fn moments(&self, data: &Dataset, mut weights: impl FnMut(&[f64]) -> Result<Vec<f64>>) -> Result<DMatrix<f64>> {
        let p = self.p();
        let d = self.part.d();
        let mut m = DMatrix::<f64>::zeros(p, p);
        let mut psi = vec![0.0; p];
        let inv_n = 1.0 / data.n() as f64;
        for (x, _) in data.iter() {
            let w = weights(x)?;
            for (j, idx) in self.index.iter().enumerate() {
                for (l, &i) in idx.iter().enumerate() {
                    psi[i] = w[j] * if l < d { x[l] } else { 1.0 };
                }
            }
            for a in 0..p {
                if psi[a] == 0.0 {
                    continue;
                }
                for b in 0..p {
                    m[(a, b)] += psi[a] * psi[b] * inv_n;
                }
            }
        }
        Ok(m)
    }

    fn sigma2(&self, residual_ss: f64, n: usize, estimator: VarianceEstimator) -> Result<f64> {
        match estimator {
            VarianceEstimator::Mle => Ok(residual_ss / n as f64),
            VarianceEstimator::DofCorrected => {
                if n <= self.p() {
                    return Err(invalid(format!("dof-corrected variance needs n > {}, got n = {n}", self.p())));
                }
                Ok(residual_ss / (n - self.p()) as f64)
            }
        }
    }

    /// `mass[j]` is the total weight of piece `j`; zero mass is an error.
    fn check_pieces(&self, counts: &[usize], mass: &[f64]) -> Result<()> {
        let d = self.part.d();
        for (j, (&c, &m)) in counts.iter().zip(mass).enumerate() {
            if m == 0.0 {
                return Err(Error::EmptyPiece { piece: j + 1 });
            }
            if c < d + 1 {
                log::warn!("piece {} has {c} points (< {}); its moment block may be singular, using a pseudo-inverse", j + 1, d + 1);
            }
        }
        Ok(())
    }

    /// Pseudo-inverse of `v`, taken separately on each group of pieces that
    /// `v` couples. Equal to the full pseudo-inverse but keeps exact zeros.
    fn block_pinv(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let k = self.index.len();
        let mut group: Vec<usize> = (0..k).collect();
        fn root(g: &mut [usize], mut j: usize) -> usize {
            while g[j] != j {
                g[j] = g[g[j]];
                j = g[j];
            }
            j
        }
        for a in 0..k {
            for b in a + 1..k {
                let coupled = self.index[a].iter().any(|&i| self.index[b].iter().any(|&l| v[(i, l)] != 0.0));
                if coupled {
                    let (ra, rb) = (root(&mut group, a), root(&mut group, b));
                    group[ra.max(rb)] = ra.min(rb);
                }
            }
        }
        let mut out = DMatrix::zeros(v.nrows(), v.ncols());
        for r in 0..k {
            if root(&mut group, r) != r {
                continue;
            }
            let idx: Vec<usize> = (0..k).filter(|&j| root(&mut group, j) == r).flat_map(|j| self.index[j].clone()).collect();
            let block = DMatrix::from_fn(idx.len(), idx.len(), |a, b| v[(idx[a], idx[b])]);
            let inv = pinv(&block);
            for (a, &ia) in idx.iter().enumerate() {
                for (b, &ib) in idx.iter().enumerate() {
                    out[(ia, ib)] = inv[(a, b)];
                }
            }
        }
        out
    }

    fn estimate(&self, m: DMatrix<f64>, sigma2: f64, counts: Vec<usize>) -> CovarianceEstimate {
        let v = &m * 2.0;
        let w = &m * (4.0 * sigma2);
        let v_pinv = self.block_pinv(&v);
        let c = &v_pinv * &w * &v_pinv;
        let c = (&c + c.transpose()) * 0.5;
        CovarianceEstimate {
            param_names: self.names.clone(),
            owners: self.owners.clone(),
            v: rows(&v),
            w: rows(&w),
            c: rows(&c),
            sigma2_hat: sigma2,
            segment_counts: counts,
        }
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let tol = svd.singular_values.max() * m.nrows() as f64 * f64::EPSILON;
    svd.pseudo_inverse(tol).expect("both singular vector sets were computed")
}

/// Plug-in covariance with hard point-to-piece assignment.
pub fn plugin_covariance(model: &PwaModel, data: &Dataset) -> Result<CovarianceEstimate> {
    plugin_covariance_with(model, data, VarianceEstimator::Mle)
}

pub fn plugin_covariance_with(model: &PwaModel, data: &Dataset, estimator: VarianceEstimator) -> Result<CovarianceEstimate> {
    let cx = Convex::new(model, data)?;
    let counts = cx.counts(data);
    let mass: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    cx.check_pieces(&counts, &mass)?;
    let k = cx.part.k();
    let m = cx.moments(data, |x| {
        let mut w = vec![0.0; k];
        w[cx.part.argmax(x)] = 1.0;
        Ok(w)
    })?;
    let rss: f64 = data.iter().map(|(x, y)| (y - cx.part.eval_unchecked(x)).powi(2)).sum();
    let sigma2 = cx.sigma2(rss, data.n(), estimator)?;
    Ok(cx.estimate(m, sigma2, counts))
}

/// Covariance of the smoothed estimator: smoothing weights replace the hard
/// assignment and residuals use the smoothed model. Converges to
/// [`plugin_covariance`] as `mu -> 0`.
///
/// A piece is empty when its total smoothing weight is zero; the reported
/// `segment_counts` still use the hard assignment.
pub fn smoothed_covariance(model: &PwaModel, spec: &SmoothingSpec, data: &Dataset) -> Result<CovarianceEstimate> {
    smoothed_covariance_with(model, spec, data, VarianceEstimator::Mle)
}

pub fn smoothed_covariance_with(
    model: &PwaModel,
    spec: &SmoothingSpec,
    data: &Dataset,
    estimator: VarianceEstimator,
) -> Result<CovarianceEstimate> {
    spec.require_smoothed()?;
    let cx = Convex::new(model, data)?;
    let counts = cx.counts(data);
    let mut mass = vec![0.0; cx.part.k()];
    let mut rss = 0.0;
    for (x, y) in data.iter() {
        for (m, w) in mass.iter_mut().zip(smooth_weights(cx.part, spec, x)?.as_slice()) {
            *m += w;
        }
        rss += (y - smooth_value(cx.part, spec, x)?).powi(2);
    }
    cx.check_pieces(&counts, &mass)?;
    let m = cx.moments(data, |x| Ok(smooth_weights(cx.part, spec, x)?.into_vec()))?;
    let sigma2 = cx.sigma2(rss, data.n(), estimator)?;
    Ok(cx.estimate(m, sigma2, counts))
}

/// One normal interval `estimate +- z sqrt(C_ii / N_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub name: String,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    /// Points on the piece owning the parameter.
    pub count: usize,
}

impl Interval {
    pub fn contains(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }

    pub fn length(&self) -> f64 {
        self.upper - self.lower
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceIntervals {
    pub level: f64,
    pub z: f64,
    pub intervals: Vec<Interval>,
}

/// Two-sided standard normal quantile for `level`, e.g. 1.96 at 0.95.
pub fn normal_quantile(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(invalid(format!("confidence level must lie in (0, 1), got {level}")));
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(normal.inverse_cdf(0.5 + level / 2.0))
}

/// Intervals for the part-1 parameters of a fit.
pub fn confidence_intervals(fit: &FitResult, cov: &CovarianceEstimate, level: f64) -> Result<ConfidenceIntervals> {
    confidence_intervals_for(&fit.model, cov, level)
}

pub fn confidence_intervals_for(model: &PwaModel, cov: &CovarianceEstimate, level: f64) -> Result<ConfidenceIntervals> {
    let z = normal_quantile(level)?;
    let p = cov.dim();
    let theta = model.pack();
    if model.k1() * (model.d() + 1) != p {
        return Err(Error::DimensionMismatch { expected: p, got: model.k1() * (model.d() + 1) });
    }
    let intervals = (0..p)
        .map(|i| {
            let count = cov.segment_counts[cov.owners[i]];
            if count == 0 {
                return Err(Error::EmptyPiece { piece: cov.owners[i] + 1 });
            }
            let half = z * (cov.c[i][i].max(0.0) / count as f64).sqrt();
            Ok(Interval {
                name: cov.param_names[i].clone(),
                estimate: theta[i],
                lower: theta[i] - half,
                upper: theta[i] + half,
                count,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ConfidenceIntervals { level, z, intervals })
}

/// `alpha1 x + alpha2 + beta1 (x - theta)^+`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hinge1d {
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta1: f64,
    pub theta: f64,
}

impl Hinge1d {
    pub fn evaluate(&self, x: f64) -> f64 {
        self.alpha1 * x + self.alpha2 + self.beta1 * (x - self.theta).max(0.0)
    }

    pub fn rss(&self, data: &Dataset) -> f64 {
        data.iter().map(|(x, y)| (y - self.evaluate(x[0])).powi(2)).sum()
    }

    /// Equivalent max-affine difference: convex when `beta1 >= 0`.
    pub fn to_pwa(&self) -> PwaModel {
        let base = vec![self.alpha1, self.alpha2];
        let kink = |b: f64| vec![b, -b * self.theta];
        if self.beta1 >= 0.0 {
            let second = vec![self.alpha1 + self.beta1, self.alpha2 - self.beta1 * self.theta];
            PwaModel::convex(MaxAffine::from_rows(&[base, second]).expect("finite hinge"))
        } else {
            let part1 = MaxAffine::from_rows(&[base]).expect("finite hinge");
            let part2 = MaxAffine::from_rows(&[vec![0.0, 0.0], kink(-self.beta1)]).expect("finite hinge");
            PwaModel::new(part1, part2).expect("matching dimensions")
        }
    }
}

/// Two planes meeting above the line through `p` and `q`:
/// `alpha1 x + alpha2 y + alpha3 + beta2 (y - f(x)) 1{s(x, y) >= 0}` with `s`
/// the signed area of `(q - p, (x, y) - p)`. For a vertical line the term is
/// `beta2 (x - p_x) 1{s >= 0}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hinge2d {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub beta2: f64,
    pub p: [f64; 2],
    pub q: [f64; 2],
}

impl Hinge2d {
    pub fn new(alpha: [f64; 3], beta2: f64, p: [f64; 2], q: [f64; 2]) -> Result<Self> {
        if p == q {
            return Err(invalid("hinge line needs two distinct points"));
        }
        if alpha.iter().chain(&[beta2]).chain(&p).chain(&q).any(|v| !v.is_finite()) {
            return Err(invalid("hinge coefficients must be finite"));
        }
        Ok(Self { alpha1: alpha[0], alpha2: alpha[1], alpha3: alpha[2], beta2, p, q })
    }

    pub fn side(&self, x: f64, y: f64) -> f64 {
        let [px, py] = self.p;
        let [qx, qy] = self.q;
        (qx - px) * (y - py) - (x - px) * (qy - py)
    }

    /// The projected line `y = f(x)`, or `None` when it is vertical.
    pub fn line(&self, x: f64) -> Option<f64> {
        let [px, py] = self.p;
        let [qx, qy] = self.q;
        (px != qx).then(|| (x - px) * (qy - py) / (qx - px) + py)
    }

    pub fn evaluate(&self, x: f64, y: f64) -> f64 {
        let base = self.alpha1 * x + self.alpha2 * y + self.alpha3;
        if self.side(x, y) < 0.0 {
            return base;
        }
        let gap = match self.line(x) {
            Some(fx) => y - fx,
            None => x - self.p[0],
        };
        base + self.beta2 * gap
    }

    /// Equivalent max-affine difference.
    pub fn to_pwa(&self) -> PwaModel {
        let [px, py] = self.p;
        let [qx, qy] = self.q;
        // the hinge term is c * max(s, 0) with s affine in (x, y)
        let c = if px != qx { self.beta2 / (qx - px) } else { -self.beta2 / (qy - py) };
        let s = [-(qy - py), qx - px, px * (qy - py) - py * (qx - px)];
        let base = vec![self.alpha1, self.alpha2, self.alpha3];
        if c >= 0.0 {
            let second: Vec<f64> = base.iter().zip(&s).map(|(b, si)| b + c * si).collect();
            PwaModel::convex(MaxAffine::from_rows(&[base, second]).expect("finite hinge"))
        } else {
            let kink: Vec<f64> = s.iter().map(|si| -c * si).collect();
            let part1 = MaxAffine::from_rows(&[base]).expect("finite hinge");
            let part2 = MaxAffine::from_rows(&[vec![0.0; 3], kink]).expect("finite hinge");
            PwaModel::new(part1, part2).expect("matching dimensions")
        }
    }
}

/// Either hinge parameterization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HingeModel {
    Line(Hinge1d),
    Plane(Hinge2d),
}

impl HingeModel {
    pub fn to_pwa(&self) -> PwaModel {
        match self {
            HingeModel::Line(h) => h.to_pwa(),
            HingeModel::Plane(h) => h.to_pwa(),
        }
    }
}

/// Evaluates a two-plane hinge at `(x, y)`.
pub fn hinge_eval_2d(model: &Hinge2d, x: f64, y: f64) -> f64 {
    model.evaluate(x, y)
}

/// Grid search for the change point on `grid` equidistant points of
/// `[-1, 1]`, with least squares for the remaining coefficients.
pub fn hinge_fit_1d(data: &Dataset, grid: usize) -> Result<Hinge1d> {
    hinge_fit_1d_range(data, grid, -1.0, 1.0)
}

/// [`hinge_fit_1d`] on `[lo, hi]`. Candidates whose regressors are collinear
/// are skipped; ties go to the smallest change point.
pub fn hinge_fit_1d_range(data: &Dataset, grid: usize, lo: f64, hi: f64) -> Result<Hinge1d> {
    if data.d() != 1 {
        return Err(Error::DimensionMismatch { expected: 1, got: data.d() });
    }
    if grid < 2 {
        return Err(invalid("hinge grid needs at least 2 points"));
    }
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(invalid(format!("invalid hinge grid range [{lo}, {hi}]")));
    }
    let step = (hi - lo) / (grid - 1) as f64;
    let candidates: Vec<Option<(Hinge1d, f64)>> = (0..grid)
        .into_par_iter()
        .map(|g| {
            let theta = if g + 1 == grid { hi } else { lo + step * g as f64 };
            hinge_ols(data, theta)
        })
        .collect();

    // residuals equal up to rounding count as ties
    let floor = 1e-12 * data.responses().iter().map(|y| y * y).sum::<f64>();
    let mut best: Option<(Hinge1d, f64)> = None;
    for (h, rss) in candidates.into_iter().flatten() {
        let better = match &best {
            None => true,
            Some((_, b)) => rss < *b - 1e-9 * b - floor,
        };
        if better {
            best = Some((h, rss));
        }
    }
    best.map(|(h, _)| h)
        .ok_or_else(|| Error::Numerical("every hinge candidate had collinear regressors".into()))
}

fn hinge_ols(data: &Dataset, theta: f64) -> Option<(Hinge1d, f64)> {
    let n = data.n();
    let x = DMatrix::from_fn(n, 3, |i, j| {
        let xi = data.x(i)[0];
        match j {
            0 => xi,
            1 => 1.0,
            _ => (xi - theta).max(0.0),
        }
    });
    let y = DMatrix::from_column_slice(n, 1, data.responses());
    let svd = x.svd(true, true);
    let (smax, smin) = (svd.singular_values.max(), svd.singular_values.min());
    if n < 3 || smin <= 1e-10 * smax {
        return None;
    }
    let beta = svd.solve(&y, 0.0).ok()?;
    let h = Hinge1d { alpha1: beta[0], alpha2: beta[1], beta1: beta[2], theta };
    Some((h, h.rss(data)))
}
