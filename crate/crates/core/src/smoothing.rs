//! Nesterov smoothing of max-affine functions.
//!
//! For `f(x) = max_j v_j(x)` with `v_j(x) = a_j . x + b_j`, the smoothed
//! function is
//!
//! ```text
//! f_mu(x) = max_{w in simplex} ( sum_j w_j v_j(x) - mu * rho(w) )
//! ```
//!
//! Two prox functions `rho` are supported:
//!
//! * [`Prox::Entropy`]: `rho(w) = sum_j w_j ln w_j + ln k`. The maximizer is
//!   the softmax of `v / mu` and `f_mu` is a shifted log-sum-exp. Bound:
//!   `0 <= f - f_mu <= mu ln k`.
//! * [`Prox::SquaredError`]: `rho(w) = 1/2 |w - 1/k|^2`. The maximizer is the
//!   Euclidean projection of `v / mu` onto the simplex. Bound:
//!   `0 <= f - f_mu <= mu (1 - 1/k) / 2`, which is within the commonly quoted
//!   `mu (1 - 1/k)`.
//!
//! Both are evaluated in a shift-stabilized form (the largest piece value is
//! subtracted first), so arbitrarily small `mu` does not overflow.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::{check_point, MaxAffine, PwaModel};

/// Choice of prox function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Prox {
    #[serde(rename = "entropy")]
    Entropy,
    #[serde(rename = "sqerr")]
    SquaredError,
}

impl Prox {
    /// `sup_{w in simplex} rho(w)` for `k` pieces.
    pub fn sup_rho(self, k: usize) -> f64 {
        let k = k as f64;
        match self {
            Prox::Entropy => k.ln(),
            Prox::SquaredError => 0.5 * (1.0 - 1.0 / k),
        }
    }

    /// The advertised uniform approximation bound: `mu ln k` for entropy and
    /// `mu (1 - 1/k)` for squared error.
    pub fn error_bound(self, k: usize, mu: f64) -> f64 {
        match self {
            Prox::Entropy => mu * (k as f64).ln(),
            Prox::SquaredError => mu * (1.0 - 1.0 / k as f64),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Prox::Entropy => "entropy",
            Prox::SquaredError => "sqerr",
        }
    }
}

impl std::str::FromStr for Prox {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entropy" => Ok(Prox::Entropy),
            "sqerr" | "squared-error" => Ok(Prox::SquaredError),
            other => Err(invalid(format!("unknown prox {other:?} (expected entropy or sqerr)"))),
        }
    }
}

impl std::fmt::Display for Prox {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Prox choice together with the smoothing parameter `mu`.
///
/// `mu == 0` is only constructible through [`SmoothingSpec::unsmoothed`] and
/// is accepted by value-only paths of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothingSpec {
    prox: Prox,
    mu: f64,
}

impl SmoothingSpec {
    pub fn new(prox: Prox, mu: f64) -> Result<Self> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(invalid(format!("smoothing parameter mu must be positive and finite, got {mu}")));
        }
        Ok(Self { prox, mu })
    }

    pub fn entropy(mu: f64) -> Result<Self> {
        Self::new(Prox::Entropy, mu)
    }

    pub fn squared_error(mu: f64) -> Result<Self> {
        Self::new(Prox::SquaredError, mu)
    }

    /// `mu = 0`: the plain, non-smooth maximum.
    pub fn unsmoothed(prox: Prox) -> Self {
        Self { prox, mu: 0.0 }
    }

    pub fn prox(&self) -> Prox {
        self.prox
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn is_smoothed(&self) -> bool {
        self.mu > 0.0
    }

    pub(crate) fn require_smoothed(&self) -> Result<()> {
        if self.is_smoothed() {
            Ok(())
        } else {
            Err(invalid("this operation needs mu > 0"))
        }
    }
}

/// A point of the unit simplex: nonnegative entries summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexWeights(Vec<f64>);

impl SimplexWeights {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for SimplexWeights {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Euclidean projection of `c` onto the unit simplex (Michelot's method).
///
/// Components whose shifted value is exactly zero stay in the active set.
pub fn project_simplex(c: &[f64]) -> SimplexWeights {
    assert!(!c.is_empty(), "cannot project an empty vector");
    let mut w = c.to_vec();
    project_simplex_in_place(&mut w);
    SimplexWeights(w)
}

trait ActiveSet {
    fn is_active(&self, i: usize) -> bool;
    fn deactivate(&mut self, i: usize);
}

impl ActiveSet for u64 {
    fn is_active(&self, i: usize) -> bool {
        *self & (1 << i) == 0
    }

    fn deactivate(&mut self, i: usize) {
        *self |= 1 << i;
    }
}

impl ActiveSet for Vec<bool> {
    fn is_active(&self, i: usize) -> bool {
        !self[i]
    }

    fn deactivate(&mut self, i: usize) {
        self[i] = true;
    }
}

pub(crate) fn project_simplex_in_place(c: &mut [f64]) {
    if c.len() <= 64 {
        michelot(c, &mut 0u64);
    } else {
        let mut dropped = vec![false; c.len()];
        michelot(c, &mut dropped);
    }
}

/// Shift the active entries so they sum to one, drop every entry that went
/// negative, repeat until nothing is dropped.
fn michelot(c: &mut [f64], dropped: &mut impl ActiveSet) {
    let mut count = c.len();
    let mut sum: f64 = c.iter().sum();
    let mut threshold;
    loop {
        threshold = (sum - 1.0) / count as f64;
        let mut removed = false;
        for (i, &ci) in c.iter().enumerate() {
            if dropped.is_active(i) && ci - threshold < 0.0 {
                dropped.deactivate(i);
                sum -= ci;
                count -= 1;
                removed = true;
            }
        }
        if !removed {
            break;
        }
        // the largest entry is never dropped
        debug_assert!(count >= 1);
    }
    for (i, ci) in c.iter_mut().enumerate() {
        *ci = if dropped.is_active(i) { *ci - threshold } else { 0.0 };
    }
}

/// Smoothed value at `x` given the piece values `v`; writes the maximizing
/// weights into `w`. Requires `mu > 0`.
pub(crate) fn smooth_from_values(prox: Prox, mu: f64, v: &[f64], w: &mut [f64]) -> f64 {
    let k = v.len();
    if k == 1 {
        w[0] = 1.0;
        return v[0];
    }
    let vmax = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    match prox {
        Prox::Entropy => {
            let mut s = 0.0;
            for (wi, &vi) in w.iter_mut().zip(v) {
                *wi = ((vi - vmax) / mu).exp();
                s += *wi;
            }
            for wi in w.iter_mut() {
                *wi /= s;
            }
            vmax + mu * (s / k as f64).ln()
        }
        Prox::SquaredError => {
            // translation along the all-ones direction leaves the projection
            // unchanged, so both the -1/k offset and the max shift drop out
            for (wi, &vi) in w.iter_mut().zip(v) {
                *wi = (vi - vmax) / mu;
            }
            project_simplex_in_place(w);
            let inv_k = 1.0 / k as f64;
            let mut lin = 0.0;
            let mut rho = 0.0;
            for (&wi, &vi) in w.iter().zip(v) {
                lin += wi * (vi - vmax);
                rho += (wi - inv_k) * (wi - inv_k);
            }
            vmax + lin - 0.5 * mu * rho
        }
    }
}

/// Smoothed value and weights of one max-affine part; buffers have length `k`.
pub(crate) fn smooth_part(
    f: &MaxAffine,
    prox: Prox,
    mu: f64,
    x: &[f64],
    values: &mut [f64],
    weights: &mut [f64],
) -> f64 {
    f.piece_values_into(x, values);
    smooth_from_values(prox, mu, values, weights)
}

fn checked(f: &MaxAffine, spec: &SmoothingSpec, x: &[f64]) -> Result<(f64, Vec<f64>)> {
    spec.require_smoothed()?;
    check_point(f.d(), x)?;
    let mut values = vec![0.0; f.k()];
    let mut weights = vec![0.0; f.k()];
    let value = smooth_part(f, spec.prox(), spec.mu(), x, &mut values, &mut weights);
    Ok((value, weights))
}

/// `f_mu(x)`.
pub fn smooth_value(f: &MaxAffine, spec: &SmoothingSpec, x: &[f64]) -> Result<f64> {
    checked(f, spec, x).map(|(v, _)| v)
}

/// The maximizing simplex weights at `x`.
pub fn smooth_weights(f: &MaxAffine, spec: &SmoothingSpec, x: &[f64]) -> Result<SimplexWeights> {
    checked(f, spec, x).map(|(_, w)| SimplexWeights(w))
}

/// Writes `d f_mu / d theta` in part layout (`a_1..a_k` then `b_1..b_k`).
#[inline]
pub(crate) fn part_gradient_into(weights: &[f64], x: &[f64], sign: f64, out: &mut [f64]) {
    let d = x.len();
    let k = weights.len();
    for (j, &wj) in weights.iter().enumerate() {
        let s = sign * wj;
        for (o, &xi) in out[j * d..(j + 1) * d].iter_mut().zip(x) {
            *o = s * xi;
        }
        out[k * d + j] = s;
    }
}

/// Gradient of `f_mu(x)` with respect to the coefficients of `f`, laid out as
/// `(a_1, ..., a_k, b_1, ..., b_k)`: the slope block of piece `j` is
/// `w_j x` and its intercept entry is `w_j`.
pub fn smooth_gradient_theta(f: &MaxAffine, spec: &SmoothingSpec, x: &[f64]) -> Result<Vec<f64>> {
    let (_, w) = checked(f, spec, x)?;
    let mut g = vec![0.0; f.k() * (f.d() + 1)];
    part_gradient_into(&w, x, 1.0, &mut g);
    Ok(g)
}

/// `g_mu(x) = part1_mu(x) - part2_mu(x)`.
pub fn smooth_value_model(model: &PwaModel, spec: &SmoothingSpec, x: &[f64]) -> Result<f64> {
    Ok(smooth_value(model.part1(), spec, x)? - smooth_value(model.part2(), spec, x)?)
}

/// Gradient of `g_mu(x)` in [`crate::model::ParamLayout`] order: the part-1
/// block followed by the negated part-2 block.
pub fn smooth_gradient_model(model: &PwaModel, spec: &SmoothingSpec, x: &[f64]) -> Result<Vec<f64>> {
    let mut g = smooth_gradient_theta(model.part1(), spec, x)?;
    g.extend(smooth_gradient_theta(model.part2(), spec, x)?.into_iter().map(|v| -v));
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn abs_fn() -> MaxAffine {
        MaxAffine::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap()
    }

    /// All nonempty active sets; on each, the equality-constrained projection
    /// has a closed form. The feasible candidate closest to `c` is the answer.
    fn brute_force_projection(c: &[f64]) -> Vec<f64> {
        let k = c.len();
        let mut best = (f64::INFINITY, vec![]);
        for mask in 1u32..(1 << k) {
            let idx: Vec<usize> = (0..k).filter(|i| mask & (1 << i) != 0).collect();
            let t = (idx.iter().map(|&i| c[i]).sum::<f64>() - 1.0) / idx.len() as f64;
            let mut w = vec![0.0; k];
            let mut feasible = true;
            for &i in &idx {
                w[i] = c[i] - t;
                if w[i] < -1e-14 {
                    feasible = false;
                }
            }
            if !feasible {
                continue;
            }
            let dist: f64 = w.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist < best.0 {
                best = (dist, w);
            }
        }
        best.1
    }

    /// Dense grid search over the 2-simplex for the squared-error maximizer.
    fn grid_sqerr_2(v: [f64; 2], mu: f64) -> (f64, f64) {
        let n = 200_000;
        let mut best = (f64::NEG_INFINITY, 0.0);
        for i in 0..=n {
            let w1 = i as f64 / n as f64;
            let w = [w1, 1.0 - w1];
            let rho = 0.5 * ((w[0] - 0.5).powi(2) + (w[1] - 0.5).powi(2));
            let obj = w[0] * v[0] + w[1] * v[1] - mu * rho;
            if obj > best.0 {
                best = (obj, w1);
            }
        }
        best
    }

    #[test]
    fn single_piece_smooths_to_itself() {
        let f = MaxAffine::from_rows(&[vec![2.0, -1.0, 0.5]]).unwrap();
        for spec in [SmoothingSpec::entropy(0.3).unwrap(), SmoothingSpec::squared_error(0.3).unwrap()] {
            assert_eq!(smooth_value(&f, &spec, &[0.25, 1.0]).unwrap(), 2.0 * 0.25 - 1.0 + 0.5);
        }
    }

    #[test]
    fn entropy_abs_at_zero() {
        let spec = SmoothingSpec::entropy(0.1).unwrap();
        assert_eq!(smooth_value(&abs_fn(), &spec, &[0.0]).unwrap(), 0.0);
    }

    #[test]
    fn entropy_abs_off_center() {
        let spec = SmoothingSpec::entropy(0.1).unwrap();
        // 0.1 * ln(cosh(0.5)), reference value from 50-digit arithmetic
        let expected = 0.012_011_450_695_827_752;
        let got = smooth_value(&abs_fn(), &spec, &[0.05]).unwrap();
        assert!((got - expected).abs() < 1e-15, "{got}");
    }

    #[test]
    fn squared_error_far_from_kink() {
        let spec = SmoothingSpec::squared_error(0.1).unwrap();
        let (grid_val, grid_w1) = grid_sqerr_2([1.0, -1.0], 0.1);
        let got = smooth_value(&abs_fn(), &spec, &[1.0]).unwrap();
        let w = smooth_weights(&abs_fn(), &spec, &[1.0]).unwrap();
        assert_eq!(w.as_slice(), &[1.0, 0.0]);
        assert_eq!(grid_w1, 1.0);
        // rho at a vertex is (1 - 1/k)/2 = 1/4, so the value is 1 - mu/4
        assert!((got - 0.975).abs() < 1e-15);
        assert!((got - grid_val).abs() < 1e-12);
    }

    #[test]
    fn squared_error_matches_grid_near_kink() {
        let spec = SmoothingSpec::squared_error(0.1).unwrap();
        for x in [-0.04, -0.01, 0.0, 0.02, 0.049] {
            let (grid_val, grid_w1) = grid_sqerr_2([x, -x], 0.1);
            let got = smooth_value(&abs_fn(), &spec, &[x]).unwrap();
            let w = smooth_weights(&abs_fn(), &spec, &[x]).unwrap();
            assert!((got - grid_val).abs() < 1e-9);
            assert!((w[0] - grid_w1).abs() < 1e-5);
        }
    }

    #[test]
    fn identical_pieces_get_equal_weight() {
        let f = MaxAffine::from_rows(&[vec![0.7, 0.1], vec![0.7, 0.1]]).unwrap();
        for spec in [SmoothingSpec::entropy(0.5).unwrap(), SmoothingSpec::squared_error(0.5).unwrap()] {
            let w = smooth_weights(&f, &spec, &[0.3]).unwrap();
            assert_eq!(w.as_slice(), &[0.5, 0.5]);
        }
    }

    #[test]
    fn entropy_weights_are_softmax() {
        // piece values (1, 0) at x = 0, mu = 1
        let f = MaxAffine::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let w = smooth_weights(&f, &SmoothingSpec::entropy(1.0).unwrap(), &[0.0]).unwrap();
        let e = std::f64::consts::E;
        assert!((w[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((w[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn squared_error_weights_from_projection() {
        assert_eq!(project_simplex(&[2.0, 0.0]).as_slice(), brute_force_projection(&[2.0, 0.0]).as_slice());
        assert_eq!(project_simplex(&[2.0, 0.0]).as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project_simplex(&[0.3, 0.7]).as_slice(), &[0.3, 0.7]);
        assert_eq!(project_simplex(&[1.0, 1.0]).as_slice(), &[0.5, 0.5]);
        let w = project_simplex(&[0.9, 0.5, -0.4]);
        let oracle = brute_force_projection(&[0.9, 0.5, -0.4]);
        for i in 0..3 {
            assert!((w[i] - [0.7, 0.3, 0.0][i]).abs() < 1e-15);
            assert!((w[i] - oracle[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn mu_must_be_positive() {
        assert!(SmoothingSpec::entropy(0.0).is_err());
        assert!(SmoothingSpec::squared_error(-1.0).is_err());
        assert!(SmoothingSpec::entropy(f64::NAN).is_err());
        let spec = SmoothingSpec::unsmoothed(Prox::Entropy);
        assert!(smooth_value(&abs_fn(), &spec, &[0.0]).is_err());
        assert!(smooth_gradient_theta(&abs_fn(), &spec, &[0.0]).is_err());
    }

    #[test]
    fn gradient_single_piece_and_kink() {
        let one = MaxAffine::from_rows(&[vec![3.0, 1.0]]).unwrap();
        let g = smooth_gradient_theta(&one, &SmoothingSpec::entropy(0.01).unwrap(), &[0.4]).unwrap();
        assert_eq!(g, vec![0.4, 1.0]);
        let x = 0.0;
        for spec in [SmoothingSpec::entropy(0.2).unwrap(), SmoothingSpec::squared_error(0.2).unwrap()] {
            let g = smooth_gradient_theta(&abs_fn(), &spec, &[x]).unwrap();
            assert_eq!(g, vec![x / 2.0, x / 2.0, 0.5, 0.5]);
        }
    }

    #[test]
    fn tiny_mu_does_not_overflow() {
        let f = MaxAffine::from_rows(&[vec![500.0, 3.0], vec![-500.0, 1.0]]).unwrap();
        for spec in [SmoothingSpec::entropy(1e-8).unwrap(), SmoothingSpec::squared_error(1e-8).unwrap()] {
            let v = smooth_value(&f, &spec, &[1.0]).unwrap();
            assert!(v.is_finite());
            assert!((v - 503.0).abs() < 1e-6);
        }
    }

    #[test]
    fn trivial_part2_drops_out() {
        let m = PwaModel::convex(abs_fn());
        let spec = SmoothingSpec::entropy(0.1).unwrap();
        let x = [0.03];
        assert_eq!(
            smooth_value_model(&m, &spec, &x).unwrap(),
            smooth_value(m.part1(), &spec, &x).unwrap()
        );
    }

    fn coeff_strategy(max_k: usize, max_d: usize) -> impl Strategy<Value = (MaxAffine, Vec<f64>)> {
        (1..=max_k, 1..=max_d).prop_flat_map(|(k, d)| {
            (
                prop::collection::vec(-1.0f64..1.0, k * (d + 1)),
                prop::collection::vec(-2.0f64..2.0, d),
            )
                .prop_map(move |(c, x)| (MaxAffine::from_flat(d, c).unwrap(), x))
        })
    }

    fn central_difference(f: &MaxAffine, spec: &SmoothingSpec, x: &[f64], h: f64) -> Vec<f64> {
        let flat = f.rows().flat_map(|r| r.to_vec()).collect::<Vec<_>>();
        let d = f.d();
        let k = f.k();
        // map row-major (a_j, b_j) storage onto (a_1..a_k, b_1..b_k) layout
        let mut g = vec![0.0; flat.len()];
        for j in 0..k {
            for c in 0..=d {
                let idx = j * (d + 1) + c;
                let mut plus = flat.clone();
                let mut minus = flat.clone();
                plus[idx] += h;
                minus[idx] -= h;
                let fp = smooth_value(&MaxAffine::from_flat(d, plus).unwrap(), spec, x).unwrap();
                let fm = smooth_value(&MaxAffine::from_flat(d, minus).unwrap(), spec, x).unwrap();
                let out = if c < d { j * d + c } else { k * d + j };
                g[out] = (fp - fm) / (2.0 * h);
            }
        }
        g
    }

    proptest! {
        #[test]
        fn projection_matches_active_set_enumeration(c in prop::collection::vec(-3.0f64..3.0, 1..=6)) {
            let w = project_simplex(&c);
            let oracle = brute_force_projection(&c);
            for (a, b) in w.as_slice().iter().zip(&oracle) {
                prop_assert!((a - b).abs() < 1e-10);
            }
            prop_assert!((w.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(w.as_slice().iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn sandwich_bounds_hold((f, x) in coeff_strategy(5, 4), mu in prop::sample::select(vec![1.0, 0.1, 0.01, 1e-4])) {
            let exact = f.evaluate(&x).unwrap();
            for prox in [Prox::Entropy, Prox::SquaredError] {
                let spec = SmoothingSpec::new(prox, mu).unwrap();
                let gap = exact - smooth_value(&f, &spec, &x).unwrap();
                prop_assert!(gap >= -1e-10);
                prop_assert!(gap <= mu * prox.sup_rho(f.k()) + 1e-10);
                prop_assert!(gap <= prox.error_bound(f.k(), mu) + 1e-10);
            }
        }

        #[test]
        fn entropy_value_is_monotone_in_mu((f, x) in coeff_strategy(5, 3)) {
            let mut prev = f64::NEG_INFINITY;
            for mu in [1.0, 0.5, 0.1, 0.05, 0.01] {
                let v = smooth_value(&f, &SmoothingSpec::entropy(mu).unwrap(), &x).unwrap();
                prop_assert!(v >= prev - 1e-12);
                prev = v;
            }
        }

        #[test]
        fn smoothed_is_midpoint_convex((f, x) in coeff_strategy(4, 3), y_seed in prop::collection::vec(-2.0f64..2.0, 3)) {
            let y = &y_seed[..f.d()];
            let mid: Vec<f64> = x.iter().zip(y).map(|(a, b)| 0.5 * (a + b)).collect();
            for spec in [SmoothingSpec::entropy(0.1).unwrap(), SmoothingSpec::squared_error(0.1).unwrap()] {
                let lhs = smooth_value(&f, &spec, &mid).unwrap();
                let rhs = 0.5 * (smooth_value(&f, &spec, &x).unwrap() + smooth_value(&f, &spec, y).unwrap());
                prop_assert!(lhs <= rhs + 1e-12);
            }
        }

        #[test]
        fn weights_live_on_the_simplex((f, x) in coeff_strategy(6, 3), mu in 1e-6f64..10.0) {
            for prox in [Prox::Entropy, Prox::SquaredError] {
                let w = smooth_weights(&f, &SmoothingSpec::new(prox, mu).unwrap(), &x).unwrap();
                prop_assert!(w.as_slice().iter().all(|&v| v >= 0.0));
                prop_assert!((w.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn gradient_matches_finite_differences((f, x) in coeff_strategy(4, 3), mu in 0.01f64..1.0) {
            for prox in [Prox::Entropy, Prox::SquaredError] {
                let spec = SmoothingSpec::new(prox, mu).unwrap();
                let g = smooth_gradient_theta(&f, &spec, &x).unwrap();
                let fd = central_difference(&f, &spec, &x, 1e-6);
                let scale = g.iter().map(|v| v.abs()).fold(1.0, f64::max);
                for (a, b) in g.iter().zip(&fd) {
                    prop_assert!((a - b).abs() / scale < 1e-5, "{prox}: {a} vs {b}");
                }
            }
        }
    }
}
