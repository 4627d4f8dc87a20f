//! Least-squares criterion on smoothed models and its gradient.

use crate::error::{invalid, Error, Result};
use crate::model::{ParamLayout, PwaModel};
use crate::smoothing::{part_gradient_into, smooth_from_values, SmoothingSpec};

/// `n` paired observations `(x_i, y_i)` with `x_i` in `R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    d: usize,
    x: Vec<f64>,
    y: Vec<f64>,
}

impl Dataset {
    /// Builds from a row-major `n x d` predictor buffer and `n` responses.
    pub fn from_flat(d: usize, x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if d == 0 {
            return Err(invalid("predictor dimension must be >= 1"));
        }
        if y.is_empty() {
            return Err(invalid("dataset needs at least one observation"));
        }
        if x.len() != y.len() * d {
            return Err(Error::DimensionMismatch {
                expected: y.len() * d,
                got: x.len(),
            });
        }
        if x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(invalid("dataset entries must be finite"));
        }
        Ok(Self { d, x, y })
    }

    pub fn from_rows(rows: &[Vec<f64>], y: Vec<f64>) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(invalid("all predictor rows must have the same length"));
        }
        Self::from_flat(d, rows.concat(), y)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    pub fn y(&self, i: usize) -> f64 {
        self.y[i]
    }

    pub fn responses(&self) -> &[f64] {
        &self.y
    }

    pub fn predictors(&self) -> &[f64] {
        &self.x
    }

    /// `(x_i, y_i)` pairs in row order.
    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> {
        self.x.chunks_exact(self.d).zip(self.y.iter().copied())
    }

    /// Rows reordered so that new row `i` is old row `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let mut x = Vec::with_capacity(self.x.len());
        let mut y = Vec::with_capacity(self.y.len());
        for &i in order {
            x.extend_from_slice(self.x(i));
            y.push(self.y[i]);
        }
        Self { d: self.d, x, y }
    }
}

fn check_dims(model: &PwaModel, data: &Dataset) -> Result<()> {
    if model.d() != data.d() {
        return Err(Error::DimensionMismatch {
            expected: model.d(),
            got: data.d(),
        });
    }
    Ok(())
}

/// Value (and optionally gradient) of `M(theta) = (1/n) sum (y_i - g(x_i))^2`
/// evaluated directly on a flat parameter vector.
///
/// Holds scratch buffers so repeated evaluation inside the optimizer does not
/// allocate.
#[derive(Debug, Clone)]
pub(crate) struct Criterion {
    layout: ParamLayout,
    spec: SmoothingSpec,
    values: Vec<f64>,
    weights: Vec<f64>,
    point_grad: Vec<f64>,
}

impl Criterion {
    pub(crate) fn new(layout: ParamLayout, spec: SmoothingSpec) -> Self {
        let kmax = layout.k1.max(layout.k2);
        Self {
            layout,
            spec,
            values: vec![0.0; kmax],
            weights: vec![0.0; kmax],
            point_grad: vec![0.0; layout.len()],
        }
    }

    /// Piece values of `part` at `x`, read straight from `theta`.
    #[inline]
    fn part_values(layout: &ParamLayout, theta: &[f64], part: usize, x: &[f64], out: &mut [f64]) {
        let (off, k) = if part == 0 {
            (0, layout.k1)
        } else {
            (layout.k1 * (layout.d + 1), layout.k2)
        };
        let d = layout.d;
        for (j, o) in out[..k].iter_mut().enumerate() {
            let slope = &theta[off + j * d..off + (j + 1) * d];
            let mut acc = theta[off + k * d + j];
            for (a, xi) in slope.iter().zip(x) {
                acc += a * xi;
            }
            *o = acc;
        }
    }

    /// `g(x)` at `theta`; when `grad` is given, also writes `dg/dtheta`.
    #[inline]
    fn model_value(&mut self, theta: &[f64], x: &[f64], grad: bool) -> f64 {
        let layout = self.layout;
        let mut total = 0.0;
        for (part, k, sign) in [(0, layout.k1, 1.0), (1, layout.k2, -1.0)] {
            let values = &mut self.values[..k];
            Self::part_values(&layout, theta, part, x, values);
            let v = if self.spec.is_smoothed() {
                let weights = &mut self.weights[..k];
                let v = smooth_from_values(self.spec.prox(), self.spec.mu(), values, weights);
                if grad {
                    let off = if part == 0 { 0 } else { layout.k1 * (layout.d + 1) };
                    let block = &mut self.point_grad[off..off + k * (layout.d + 1)];
                    part_gradient_into(weights, x, sign, block);
                }
                v
            } else {
                values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            };
            total += sign * v;
        }
        total
    }

    /// Mean squared residual; accumulates the gradient into `grad` when given.
    pub(crate) fn evaluate(&mut self, theta: &[f64], data: &Dataset, mut grad: Option<&mut [f64]>) -> f64 {
        debug_assert_eq!(theta.len(), self.layout.len());
        let want_grad = grad.is_some();
        if let Some(g) = grad.as_deref_mut() {
            g.fill(0.0);
        }
        let mut sum = 0.0;
        for (x, y) in data.iter() {
            let r = y - self.model_value(theta, x, want_grad);
            sum += r * r;
            if let Some(g) = grad.as_deref_mut() {
                for (gi, pi) in g.iter_mut().zip(&self.point_grad) {
                    *gi += r * pi;
                }
            }
        }
        let n = data.n() as f64;
        if let Some(g) = grad {
            for gi in g.iter_mut() {
                *gi *= -2.0 / n;
            }
        }
        sum / n
    }
}

/// `M_mu(theta) = (1/n) sum_i (y_i - g_mu(x_i))^2`.
///
/// `spec.mu() == 0` (see [`SmoothingSpec::unsmoothed`]) evaluates the plain
/// non-smooth criterion.
pub fn least_squares(model: &PwaModel, spec: &SmoothingSpec, data: &Dataset) -> Result<f64> {
    check_dims(model, data)?;
    let mut c = Criterion::new(model.layout(), *spec);
    Ok(c.evaluate(&model.pack(), data, None))
}

/// Exact gradient of [`least_squares`]:
/// `-(2/n) sum_i (y_i - g_mu(x_i)) grad_theta g_mu(x_i)` in
/// [`ParamLayout`] order. Needs `mu > 0`.
pub fn least_squares_gradient(model: &PwaModel, spec: &SmoothingSpec, data: &Dataset) -> Result<Vec<f64>> {
    check_dims(model, data)?;
    spec.require_smoothed()?;
    let mut c = Criterion::new(model.layout(), *spec);
    let mut g = vec![0.0; model.layout().len()];
    c.evaluate(&model.pack(), data, Some(&mut g));
    Ok(g)
}

/// Mean squared residual of the unsmoothed model.
pub fn empirical_norm(model: &PwaModel, data: &Dataset) -> Result<f64> {
    check_dims(model, data)?;
    let sum: f64 = data
        .iter()
        .map(|(x, y)| {
            let r = y - model.eval_unchecked(x);
            r * r
        })
        .sum();
    Ok(sum / data.n() as f64)
}
