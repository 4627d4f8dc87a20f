//! Continuous piecewise-affine functions in difference-of-max-affine form.
//!
//! A convex piecewise-affine function is stored as the maximum of `k` affine
//! pieces, [`MaxAffine`]. An arbitrary continuous piecewise-affine function is
//! the difference of two of them, [`PwaModel`]. The flat parameter vector used
//! by the optimizer and the covariance code always follows [`ParamLayout`].

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Maximum of `k` affine pieces `x -> a_j . x + b_j` on `R^d`.
///
/// Rows are stored contiguously as `(a_j, b_j)`, i.e. the `k x (d+1)` matrix
/// whose `j`-th row is the slope vector followed by the intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct MaxAffine {
    d: usize,
    k: usize,
    coeffs: Vec<f64>,
}

impl MaxAffine {
    /// Builds a max-affine function from `k` rows of length `d + 1`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows.first().ok_or_else(|| invalid("max-affine needs k >= 1 pieces"))?;
        if first.len() < 2 {
            return Err(invalid("each row needs at least one slope and an intercept"));
        }
        let d = first.len() - 1;
        let mut coeffs = Vec::with_capacity(rows.len() * (d + 1));
        for row in rows {
            if row.len() != d + 1 {
                return Err(Error::DimensionMismatch {
                    expected: d + 1,
                    got: row.len(),
                });
            }
            coeffs.extend_from_slice(row);
        }
        Self::from_flat(d, coeffs)
    }

    /// Builds from a row-major `k x (d+1)` buffer.
    pub fn from_flat(d: usize, coeffs: Vec<f64>) -> Result<Self> {
        if d == 0 {
            return Err(invalid("input dimension d must be >= 1"));
        }
        if coeffs.is_empty() || coeffs.len() % (d + 1) != 0 {
            return Err(invalid(format!(
                "coefficient buffer of length {} is not a positive multiple of d+1 = {}",
                coeffs.len(),
                d + 1
            )));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(invalid("coefficients must be finite"));
        }
        let k = coeffs.len() / (d + 1);
        Ok(Self { d, k, coeffs })
    }

    /// The single zero piece `x -> 0`.
    pub fn zero(d: usize) -> Self {
        assert!(d >= 1, "input dimension must be >= 1");
        Self {
            d,
            k: 1,
            coeffs: vec![0.0; d + 1],
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Row `j` as `(a_j, b_j)`.
    pub fn row(&self, j: usize) -> &[f64] {
        &self.coeffs[j * (self.d + 1)..(j + 1) * (self.d + 1)]
    }

    pub fn slope(&self, j: usize) -> &[f64] {
        &self.row(j)[..self.d]
    }

    pub fn intercept(&self, j: usize) -> f64 {
        self.row(j)[self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.coeffs.chunks_exact(self.d + 1)
    }

    /// `a_j . x + b_j`. The caller guarantees `x.len() == d`.
    #[inline]
    pub fn piece_value(&self, j: usize, x: &[f64]) -> f64 {
        let row = self.row(j);
        let mut acc = row[self.d];
        for (a, xi) in row[..self.d].iter().zip(x) {
            acc += a * xi;
        }
        acc
    }

    /// Writes all piece values at `x` into `out` (length `k`).
    #[inline]
    pub(crate) fn piece_values_into(&self, x: &[f64], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            *o = self.piece_value(j, x);
        }
    }

    /// Index of the piece attaining the maximum; ties go to the lowest index.
    pub fn argmax(&self, x: &[f64]) -> usize {
        let mut best = 0;
        let mut best_val = self.piece_value(0, x);
        for j in 1..self.k {
            let v = self.piece_value(j, x);
            if v > best_val {
                best = j;
                best_val = v;
            }
        }
        best
    }

    pub(crate) fn eval_unchecked(&self, x: &[f64]) -> f64 {
        (0..self.k)
            .map(|j| self.piece_value(j, x))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// `max_j (a_j . x + b_j)`.
    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        check_point(self.d, x)?;
        Ok(self.eval_unchecked(x))
    }

    /// True when this is the single zero row, i.e. the function `x -> 0`.
    pub fn is_trivial(&self) -> bool {
        self.k == 1 && self.coeffs.iter().all(|&c| c == 0.0)
    }

    /// Subtracts `shift` (length `d + 1`) from every row.
    fn shifted(&self, shift: &[f64]) -> Self {
        let mut coeffs = self.coeffs.clone();
        for row in coeffs.chunks_exact_mut(self.d + 1) {
            for (c, s) in row.iter_mut().zip(shift) {
                *c -= s;
            }
        }
        Self {
            d: self.d,
            k: self.k,
            coeffs,
        }
    }

    /// Reorders the pieces; `order[i]` is the old index of the new piece `i`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        assert_eq!(order.len(), self.k);
        let mut coeffs = Vec::with_capacity(self.coeffs.len());
        for &j in order {
            coeffs.extend_from_slice(self.row(j));
        }
        Self {
            d: self.d,
            k: self.k,
            coeffs,
        }
    }
}

pub(crate) fn check_point(d: usize, x: &[f64]) -> Result<()> {
    if x.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: x.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(invalid("evaluation point must be finite"));
    }
    Ok(())
}

/// Position of every coefficient of a `(k1, k2, d)` model in the flat
/// parameter vector.
///
/// The layout is `(a_{1,1}, ..., a_{1,k1}, b_{1,1}, ..., b_{1,k1}, a_{2,1},
/// ..., a_{2,k2}, b_{2,1}, ..., b_{2,k2})`, where every `a` is a block of `d`
/// entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub k1: usize,
    pub k2: usize,
    pub d: usize,
}

impl ParamLayout {
    pub fn new(k1: usize, k2: usize, d: usize) -> Self {
        Self { k1, k2, d }
    }

    pub fn len(&self) -> usize {
        (self.k1 + self.k2) * (self.d + 1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn part_offset(&self, part: usize) -> (usize, usize) {
        match part {
            0 => (0, self.k1),
            1 => (self.k1 * (self.d + 1), self.k2),
            _ => panic!("part index must be 0 or 1"),
        }
    }

    /// Index of slope component `i` of piece `j` in `part` (0 or 1).
    pub fn slope_index(&self, part: usize, j: usize, i: usize) -> usize {
        let (off, _) = self.part_offset(part);
        off + j * self.d + i
    }

    /// Index of the intercept of piece `j` in `part` (0 or 1).
    pub fn intercept_index(&self, part: usize, j: usize) -> usize {
        let (off, k) = self.part_offset(part);
        off + k * self.d + j
    }

    /// Indices of the first row of part 2, which normalization pins to zero.
    pub fn pinned_indices(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.d).map(|i| self.slope_index(1, 0, i)).collect();
        idx.push(self.intercept_index(1, 0));
        idx
    }

    /// Human-readable name of parameter `p`, e.g. `a1[2]_1` or `b2_1`.
    ///
    /// `a1[j]` is the slope vector of piece `j` of part 1; the `_i` suffix is
    /// the coordinate (omitted when `d == 1`).
    pub fn param_name(&self, p: usize) -> String {
        let (part, local) = if p < self.k1 * (self.d + 1) {
            (0, p)
        } else {
            (1, p - self.k1 * (self.d + 1))
        };
        let k = if part == 0 { self.k1 } else { self.k2 };
        if local < k * self.d {
            let (j, i) = (local / self.d, local % self.d);
            if self.d == 1 {
                format!("a{}[{}]", part + 1, j + 1)
            } else {
                format!("a{}[{}]_{}", part + 1, j + 1, i + 1)
            }
        } else {
            format!("b{}[{}]", part + 1, local - k * self.d + 1)
        }
    }
}

/// `g(x) = part1(x) - part2(x)` with both parts max-affine on the same `R^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ModelJson", try_from = "ModelJson")]
pub struct PwaModel {
    part1: MaxAffine,
    part2: MaxAffine,
}

impl PwaModel {
    pub fn new(part1: MaxAffine, part2: MaxAffine) -> Result<Self> {
        if part1.d() != part2.d() {
            return Err(Error::DimensionMismatch {
                expected: part1.d(),
                got: part2.d(),
            });
        }
        Ok(Self { part1, part2 })
    }

    /// A purely convex model: `part2` is the single zero row.
    pub fn convex(part1: MaxAffine) -> Self {
        let d = part1.d();
        Self {
            part1,
            part2: MaxAffine::zero(d),
        }
    }

    pub fn part1(&self) -> &MaxAffine {
        &self.part1
    }

    pub fn part2(&self) -> &MaxAffine {
        &self.part2
    }

    pub fn d(&self) -> usize {
        self.part1.d()
    }

    pub fn k1(&self) -> usize {
        self.part1.k()
    }

    pub fn k2(&self) -> usize {
        self.part2.k()
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self.k1(), self.k2(), self.d())
    }

    /// True when the first row of part 2 is exactly zero.
    pub fn is_normalized(&self) -> bool {
        self.part2.row(0).iter().all(|&c| c == 0.0)
    }

    pub(crate) fn eval_unchecked(&self, x: &[f64]) -> f64 {
        self.part1.eval_unchecked(x) - self.part2.eval_unchecked(x)
    }

    /// `part1(x) - part2(x)`.
    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        check_point(self.d(), x)?;
        Ok(self.eval_unchecked(x))
    }

    /// Shifts every row of both parts by the first row of part 2 so that row
    /// becomes zero. The function itself is unchanged.
    pub fn normalize(&self) -> Self {
        if self.is_normalized() {
            return self.clone();
        }
        let shift = self.part2.row(0).to_vec();
        let mut part2 = self.part2.shifted(&shift);
        for c in part2.coeffs[..self.d() + 1].iter_mut() {
            *c = 0.0;
        }
        Self {
            part1: self.part1.shifted(&shift),
            part2,
        }
    }

    /// Flattens into the [`ParamLayout`] order.
    pub fn pack(&self) -> Vec<f64> {
        let layout = self.layout();
        let mut v = vec![0.0; layout.len()];
        for (part_idx, part) in [&self.part1, &self.part2].into_iter().enumerate() {
            for j in 0..part.k() {
                for i in 0..layout.d {
                    v[layout.slope_index(part_idx, j, i)] = part.slope(j)[i];
                }
                v[layout.intercept_index(part_idx, j)] = part.intercept(j);
            }
        }
        v
    }

    /// Inverse of [`PwaModel::pack`].
    pub fn unpack(v: &[f64], k1: usize, k2: usize, d: usize) -> Result<Self> {
        if k1 == 0 || k2 == 0 || d == 0 {
            return Err(invalid("unpack needs k1 >= 1, k2 >= 1 and d >= 1"));
        }
        let layout = ParamLayout::new(k1, k2, d);
        if v.len() != layout.len() {
            return Err(Error::DimensionMismatch {
                expected: layout.len(),
                got: v.len(),
            });
        }
        let part = |part_idx: usize, k: usize| -> Result<MaxAffine> {
            let mut coeffs = Vec::with_capacity(k * (d + 1));
            for j in 0..k {
                for i in 0..d {
                    coeffs.push(v[layout.slope_index(part_idx, j, i)]);
                }
                coeffs.push(v[layout.intercept_index(part_idx, j)]);
            }
            MaxAffine::from_flat(d, coeffs)
        };
        Self::new(part(0, k1)?, part(1, k2)?)
    }

    /// Same function with the pieces of each part sorted lexicographically
    /// by `(a, b)`, followed by normalization.
    ///
    /// For a convex one-dimensional model this orders the pieces from left to
    /// right. The first row of part 2 stays first, so normalization is not
    /// disturbed.
    pub fn canonical(&self) -> Self {
        let sort_rows = |m: &MaxAffine, skip_first: bool| -> MaxAffine {
            let mut order: Vec<usize> = (0..m.k()).collect();
            let start = usize::from(skip_first);
            order[start..].sort_by(|&i, &j| {
                m.row(i)
                    .iter()
                    .zip(m.row(j))
                    .map(|(a, b)| a.total_cmp(b))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
            m.permuted(&order)
        };
        let n = self.normalize();
        Self {
            part1: sort_rows(&n.part1, false),
            part2: sort_rows(&n.part2, true),
        }
    }
}

/// Euclidean distance between two models of equal shape, minimized over
/// relabelings of the pieces of each part.
///
/// Max-affine functions do not depend on the order of their pieces, so a raw
/// parameter distance would count a relabeled but identical fit as wrong.
/// Every choice of reference row for part 2 is tried with renormalization.
pub fn aligned_distance(estimate: &PwaModel, truth: &PwaModel) -> Result<f64> {
    align_to(estimate, truth).map(|(_, dist)| dist)
}

/// The relabeling of `estimate` (normalized) closest to `truth`, with its
/// distance. Same function as `estimate`, pieces reordered.
pub fn align_to(estimate: &PwaModel, truth: &PwaModel) -> Result<(PwaModel, f64)> {
    use itertools::Itertools;
    if estimate.layout() != truth.layout() {
        return Err(invalid("models must have the same (k1, k2, d)"));
    }
    let t = truth.normalize().pack();
    let mut best: Option<(PwaModel, f64)> = None;
    for order2 in (0..estimate.k2()).permutations(estimate.k2()) {
        let relabeled = PwaModel {
            part1: estimate.part1.clone(),
            part2: estimate.part2.permuted(&order2),
        }
        .normalize();
        for order1 in (0..estimate.k1()).permutations(estimate.k1()) {
            let candidate = PwaModel {
                part1: relabeled.part1.permuted(&order1),
                part2: relabeled.part2.clone(),
            };
            let dist = candidate
                .pack()
                .iter()
                .zip(&t)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if best.as_ref().is_none_or(|(_, b)| dist < *b) {
                best = Some((candidate, dist));
            }
        }
    }
    Ok(best.expect("at least one permutation"))
}

/// Wire format: field order fixed as `d, k1, k2, coeffs1, coeffs2`.
#[derive(Serialize, Deserialize)]
struct ModelJson {
    d: usize,
    k1: usize,
    k2: usize,
    coeffs1: Vec<Vec<f64>>,
    coeffs2: Vec<Vec<f64>>,
}

impl From<PwaModel> for ModelJson {
    fn from(m: PwaModel) -> Self {
        let rows = |p: &MaxAffine| p.rows().map(<[f64]>::to_vec).collect();
        ModelJson {
            d: m.d(),
            k1: m.k1(),
            k2: m.k2(),
            coeffs1: rows(&m.part1),
            coeffs2: rows(&m.part2),
        }
    }
}

impl TryFrom<ModelJson> for PwaModel {
    type Error = Error;

    fn try_from(j: ModelJson) -> Result<Self> {
        let part1 = MaxAffine::from_rows(&j.coeffs1)?;
        let part2 = MaxAffine::from_rows(&j.coeffs2)?;
        if part1.d() != j.d || part1.k() != j.k1 || part2.k() != j.k2 {
            return Err(invalid("model JSON header disagrees with its coefficient rows"));
        }
        Self::new(part1, part2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line(a: f64, b: f64) -> Vec<f64> {
        vec![a, b]
    }

    #[test]
    fn single_piece_is_identity_affine() {
        let m = PwaModel::convex(MaxAffine::from_rows(&[line(1.0, 0.0)]).unwrap());
        assert_eq!(m.evaluate(&[0.5]).unwrap(), 0.5);
    }

    #[test]
    fn abs_as_max_of_two_lines() {
        let m = PwaModel::convex(MaxAffine::from_rows(&[line(1.0, 0.0), line(-1.0, 0.0)]).unwrap());
        assert_eq!(m.evaluate(&[-2.0]).unwrap(), 2.0);
    }

    #[test]
    fn difference_of_hinges() {
        // max{x, 0} - max{2x, 0} at x = 1; part2 keeps the zero row first.
        let p1 = MaxAffine::from_rows(&[line(1.0, 0.0), line(0.0, 0.0)]).unwrap();
        let p2 = MaxAffine::from_rows(&[line(0.0, 0.0), line(2.0, 0.0)]).unwrap();
        let m = PwaModel::new(p1.clone(), p2.clone()).unwrap();
        let x = [1.0];
        let brute = |p: &MaxAffine| (0..p.k()).map(|j| p.piece_value(j, &x)).fold(f64::MIN, f64::max);
        assert_eq!(m.evaluate(&x).unwrap(), -1.0);
        assert_eq!(brute(&p1) - brute(&p2), -1.0);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let m = PwaModel::convex(MaxAffine::from_rows(&[vec![1.0, 2.0, 0.0]]).unwrap());
        assert!(matches!(
            m.evaluate(&[1.0]),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn normalize_leaves_zero_row_model_alone() {
        let m = PwaModel::convex(MaxAffine::from_rows(&[line(1.0, 0.5), line(-1.0, 0.0)]).unwrap());
        assert_eq!(m.normalize(), m);
    }

    #[test]
    fn normalize_shifts_both_parts() {
        let m = PwaModel::new(
            MaxAffine::from_rows(&[line(1.0, 0.0)]).unwrap(),
            MaxAffine::from_rows(&[line(1.0, 1.0)]).unwrap(),
        )
        .unwrap();
        let n = m.normalize();
        assert_eq!(n.part1().row(0), &[0.0, -1.0]);
        assert_eq!(n.part2().row(0), &[0.0, 0.0]);
        for i in -10..=10 {
            let x = [f64::from(i) / 5.0];
            assert!((m.evaluate(&x).unwrap() + 1.0).abs() < 1e-15);
            assert_eq!(n.evaluate(&x).unwrap(), -1.0);
        }
    }

    #[test]
    fn unpack_small_case() {
        let m = PwaModel::unpack(&[1.0, 0.0, 0.0, 0.0], 1, 1, 1).unwrap();
        assert_eq!(m.part1().row(0), &[1.0, 0.0]);
        assert_eq!(m.part2().row(0), &[0.0, 0.0]);
    }

    #[test]
    fn unpack_wrong_length() {
        let v = vec![0.0; 11];
        assert!(matches!(
            PwaModel::unpack(&v, 2, 2, 2),
            Err(Error::DimensionMismatch { expected: 12, got: 11 })
        ));
    }

    #[test]
    fn layout_matches_documented_order() {
        // k1 = 2, k2 = 1, d = 2: a11(2) a12(2) b11 b12 | a21(2) b21
        let l = ParamLayout::new(2, 1, 2);
        assert_eq!(l.slope_index(0, 1, 0), 2);
        assert_eq!(l.intercept_index(0, 0), 4);
        assert_eq!(l.intercept_index(0, 1), 5);
        assert_eq!(l.slope_index(1, 0, 1), 7);
        assert_eq!(l.intercept_index(1, 0), 8);
        assert_eq!(l.pinned_indices(), vec![6, 7, 8]);
        assert_eq!(l.param_name(4), "b1[1]");
        assert_eq!(l.param_name(2), "a1[2]_1");
    }

    #[test]
    fn json_field_order_and_round_trip() {
        let m = PwaModel::new(
            MaxAffine::from_rows(&[line(0.1, -0.3), line(2.0, 1.0 / 3.0)]).unwrap(),
            MaxAffine::from_rows(&[line(0.0, 0.0)]).unwrap(),
        )
        .unwrap();
        let s = serde_json::to_string(&m).unwrap();
        assert!(s.starts_with(r#"{"d":1,"k1":2,"k2":1,"coeffs1":[[0.1,-0.3],[2.0,0.3333333333333333]]"#));
        let back: PwaModel = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn json_header_must_agree() {
        let s = r#"{"d":1,"k1":3,"k2":1,"coeffs1":[[1,0]],"coeffs2":[[0,0]]}"#;
        assert!(serde_json::from_str::<PwaModel>(s).is_err());
    }

    #[test]
    fn aligned_distance_ignores_piece_labels() {
        let a = PwaModel::convex(MaxAffine::from_rows(&[line(-1.0, 0.0), line(1.0, 0.2)]).unwrap());
        let b = PwaModel::convex(MaxAffine::from_rows(&[line(1.0, 0.2), line(-1.0, 0.0)]).unwrap());
        assert_eq!(aligned_distance(&a, &b).unwrap(), 0.0);
        // part-2 reference row choice: same function, different normalization
        let c = PwaModel::new(
            MaxAffine::from_rows(&[line(1.0, 0.0)]).unwrap(),
            MaxAffine::from_rows(&[line(0.0, 0.0), line(0.5, 0.1)]).unwrap(),
        )
        .unwrap();
        let c_swapped = PwaModel::new(
            MaxAffine::from_rows(&[line(0.5, -0.1)]).unwrap(),
            MaxAffine::from_rows(&[line(-0.5, -0.1), line(0.0, 0.0)]).unwrap(),
        )
        .unwrap();
        assert!(aligned_distance(&c_swapped, &c).unwrap() < 1e-15);
    }

    fn model_strategy() -> impl Strategy<Value = PwaModel> {
        (1usize..4, 1usize..4, 1usize..4).prop_flat_map(|(k1, k2, d)| {
            prop::collection::vec(-10.0f64..10.0, (k1 + k2) * (d + 1))
                .prop_map(move |v| PwaModel::unpack(&v, k1, k2, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn pack_unpack_is_bit_exact(m in model_strategy()) {
            let v = m.pack();
            let back = PwaModel::unpack(&v, m.k1(), m.k2(), m.d()).unwrap();
            prop_assert_eq!(back.pack(), v);
        }

        #[test]
        fn normalize_preserves_values_and_is_idempotent(
            m in model_strategy(),
            xs in prop::collection::vec(-3.0f64..3.0, 40),
        ) {
            let n = m.normalize();
            prop_assert!(n.is_normalized());
            prop_assert_eq!(n.normalize(), n.clone());
            for x in xs.chunks_exact(m.d()) {
                let before = m.evaluate(x).unwrap();
                let after = n.evaluate(x).unwrap();
                prop_assert!((before - after).abs() <= 1e-12 * (1.0 + before.abs()));
                let dc = m.part1().evaluate(x).unwrap() - m.part2().evaluate(x).unwrap();
                prop_assert_eq!(before, dc);
            }
        }

        #[test]
        fn max_affine_is_midpoint_convex(
            m in model_strategy(),
            xs in prop::collection::vec(-3.0f64..3.0, 6),
        ) {
            let f = m.part1();
            let d = f.d();
            let (x, y) = (&xs[..d], &xs[3..3 + d]);
            let mid: Vec<f64> = x.iter().zip(y).map(|(a, b)| 0.5 * (a + b)).collect();
            let lhs = f.evaluate(&mid).unwrap();
            let rhs = 0.5 * (f.evaluate(x).unwrap() + f.evaluate(y).unwrap());
            prop_assert!(lhs <= rhs + 1e-12);
        }
    }
}
