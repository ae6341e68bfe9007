//! Polyhedra in halfspace form `{x : Mx ≤ b}`.
//!
//! Every facet row is scaled to unit norm on construction so that a single
//! absolute tolerance (`TOL_GEOM`) is meaningful for all predicates. All
//! decisions go through the simplex routine in [`crate::lp`].

use std::fmt::Write as _;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::lp::{self, LpOutcome};

pub const TOL_GEOM: f64 = 1e-7;

/// Chebyshev radius reported for sets that contain arbitrarily large balls.
const RADIUS_CAP: f64 = 1e9;
const ZERO_COEF: f64 = 1e-12;
const DUP_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("lower bound exceeds upper bound in coordinate {0}")]
    InvertedBounds(usize),
    #[error("non-finite entry in polytope data")]
    NonFinite,
    #[error("operation requires a bounded polytope")]
    Unbounded,
    #[error("linear program exhausted its pivot budget")]
    LpStalled,
    #[error("coordinate index {index} out of range for dimension {dim}")]
    BadIndex { index: usize, dim: usize },
    #[error("coordinate selection is empty")]
    EmptySelection,
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Result of maximizing a linear function over a polytope.
#[derive(Debug, Clone, PartialEq)]
pub enum Support {
    Bounded { value: f64, point: DVector<f64> },
    Unbounded,
    Empty,
}

#[derive(Debug, Clone)]
pub struct Polytope {
    normals: DMatrix<f64>,
    offsets: DVector<f64>,
    vertices: OnceLock<Vec<DVector<f64>>>,
}

impl Polytope {
    /// Builds `{x : normals·x ≤ offsets}`, normalizing each row. Zero rows
    /// with a nonnegative offset are dropped; a zero row with a negative
    /// offset makes the set empty.
    pub fn new(normals: DMatrix<f64>, offsets: DVector<f64>) -> Result<Self> {
        if normals.nrows() != offsets.len() {
            return Err(GeometryError::DimensionMismatch {
                expected: normals.nrows(),
                got: offsets.len(),
            });
        }
        if normals.ncols() == 0 {
            return Err(GeometryError::DimensionMismatch { expected: 1, got: 0 });
        }
        if normals.iter().chain(offsets.iter()).any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let dim = normals.ncols();
        let mut rows = Vec::with_capacity(normals.nrows());
        for i in 0..normals.nrows() {
            let a = normals.row(i).transpose();
            let norm = a.norm();
            if norm <= ZERO_COEF {
                if offsets[i] < -TOL_GEOM {
                    return Ok(Self::empty(dim));
                }
                continue;
            }
            rows.push((a / norm, offsets[i] / norm));
        }
        Ok(Self::from_unit_rows(dim, &rows))
    }

    fn from_unit_rows(dim: usize, rows: &[(DVector<f64>, f64)]) -> Self {
        let mut normals = DMatrix::zeros(rows.len(), dim);
        let mut offsets = DVector::zeros(rows.len());
        for (i, (a, b)) in rows.iter().enumerate() {
            normals.row_mut(i).copy_from(&a.transpose());
            offsets[i] = *b;
        }
        Self { normals, offsets, vertices: OnceLock::new() }
    }

    /// The whole space `R^dim` (no facets).
    pub fn universe(dim: usize) -> Self {
        Self::from_unit_rows(dim, &[])
    }

    /// Canonical empty set: `x₁ ≤ −1 ∧ −x₁ ≤ −1`.
    pub fn empty(dim: usize) -> Self {
        let mut e = DVector::zeros(dim);
        e[0] = 1.0;
        Self::from_unit_rows(dim, &[(e.clone(), -1.0), (-e, -1.0)])
    }

    pub fn from_bounds(lower: &DVector<f64>, upper: &DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(GeometryError::DimensionMismatch { expected: lower.len(), got: upper.len() });
        }
        if lower.iter().chain(upper.iter()).any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if let Some(i) = (0..lower.len()).find(|&i| lower[i] > upper[i]) {
            return Err(GeometryError::InvertedBounds(i));
        }
        let dim = lower.len();
        let mut rows = Vec::with_capacity(2 * dim);
        for i in 0..dim {
            let mut e = DVector::zeros(dim);
            e[i] = 1.0;
            rows.push((e, upper[i]));
        }
        for i in 0..dim {
            let mut e = DVector::zeros(dim);
            e[i] = -1.0;
            rows.push((e, -lower[i]));
        }
        Ok(Self::from_unit_rows(dim, &rows))
    }

    /// Convex hull of a finite point set.
    pub fn from_vertices(dim: usize, points: &[DVector<f64>]) -> Result<Self> {
        if points.is_empty() {
            return Ok(Self::empty(dim));
        }
        for p in points {
            if p.len() != dim {
                return Err(GeometryError::DimensionMismatch { expected: dim, got: p.len() });
            }
        }
        // {(x, λ) : x = Vλ, λ ≥ 0, Σλ = 1}, then eliminate λ.
        let q = points.len();
        let total = dim + q;
        let mut normals = DMatrix::zeros(2 * dim + q + 2, total);
        let mut offsets = DVector::zeros(2 * dim + q + 2);
        for i in 0..dim {
            normals[(2 * i, i)] = 1.0;
            normals[(2 * i + 1, i)] = -1.0;
            for (j, p) in points.iter().enumerate() {
                normals[(2 * i, dim + j)] = -p[i];
                normals[(2 * i + 1, dim + j)] = p[i];
            }
        }
        for j in 0..q {
            normals[(2 * dim + j, dim + j)] = -1.0;
            normals[(2 * dim + q, dim + j)] = 1.0;
            normals[(2 * dim + q + 1, dim + j)] = -1.0;
        }
        offsets[2 * dim + q] = 1.0;
        offsets[2 * dim + q + 1] = -1.0;
        let lifted = Self::new(normals, offsets)?;
        lifted.project(&(0..dim).collect::<Vec<_>>())
    }

    pub fn dim(&self) -> usize {
        self.normals.ncols()
    }

    pub fn n_facets(&self) -> usize {
        self.normals.nrows()
    }

    pub fn normals(&self) -> &DMatrix<f64> {
        &self.normals
    }

    pub fn offsets(&self) -> &DVector<f64> {
        &self.offsets
    }

    fn check_dim(&self, other: usize) -> Result<()> {
        if self.dim() != other {
            return Err(GeometryError::DimensionMismatch { expected: self.dim(), got: other });
        }
        Ok(())
    }

    fn rows(&self) -> Vec<(DVector<f64>, f64)> {
        (0..self.n_facets())
            .map(|i| (self.normals.row(i).transpose(), self.offsets[i]))
            .collect()
    }

    pub fn contains_point(&self, x: &DVector<f64>, tol: f64) -> bool {
        if x.len() != self.dim() {
            return false;
        }
        (0..self.n_facets()).all(|i| self.normals.row(i).dot(&x.transpose()) <= self.offsets[i] + tol)
    }

    /// Maximizes `cᵀx` over the set.
    pub fn support(&self, c: &DVector<f64>) -> Result<Support> {
        self.check_dim(c.len())?;
        match lp::maximize(c, &self.normals, &self.offsets) {
            LpOutcome::Optimal { x, value } => Ok(Support::Bounded { value, point: x }),
            LpOutcome::Unbounded => Ok(Support::Unbounded),
            LpOutcome::Infeasible => Ok(Support::Empty),
            LpOutcome::IterationLimit => Err(GeometryError::LpStalled),
        }
    }

    /// Centre and radius of the largest inscribed ball. A negative radius
    /// means the set is empty; an infinite one that it has no bounded
    /// inscribed-ball maximum.
    pub fn chebyshev_center(&self) -> Result<(DVector<f64>, f64)> {
        let weights = DVector::from_element(self.n_facets(), 1.0);
        let (x, r) = lp::max_slack_weighted(&self.normals, &self.offsets, &weights, RADIUS_CAP)
            .ok_or(GeometryError::LpStalled)?;
        let r = if r >= 0.5 * RADIUS_CAP { f64::INFINITY } else { r };
        Ok((x, r))
    }

    pub fn is_empty(&self) -> Result<bool> {
        Ok(self.chebyshev_center()?.1 < -TOL_GEOM)
    }

    pub fn is_bounded(&self) -> Result<bool> {
        if self.is_empty()? {
            return Ok(true);
        }
        for i in 0..self.dim() {
            for s in [1.0, -1.0] {
                let mut c = DVector::zeros(self.dim());
                c[i] = s;
                if matches!(self.support(&c)?, Support::Unbounded) {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }

    pub fn intersect(&self, other: &Polytope) -> Result<Polytope> {
        self.check_dim(other.dim())?;
        let mut rows = self.rows();
        rows.extend(other.rows());
        Ok(Self::from_unit_rows(self.dim(), &rows))
    }

    /// `other ⊆ self`, decided facet by facet.
    pub fn contains(&self, other: &Polytope) -> Result<bool> {
        self.check_dim(other.dim())?;
        if other.is_empty()? {
            return Ok(true);
        }
        for i in 0..self.n_facets() {
            let a = self.normals.row(i).transpose();
            match other.support(&a)? {
                Support::Bounded { value, .. } => {
                    if value > self.offsets[i] + TOL_GEOM {
                        return Ok(false);
                    }
                }
                Support::Unbounded => return Ok(false),
                Support::Empty => return Ok(true),
            }
        }
        Ok(true)
    }

    pub fn set_equal(&self, other: &Polytope) -> Result<bool> {
        Ok(self.contains(other)? && other.contains(self)?)
    }

    /// Largest amount by which a facet of `self` is exceeded over `other`.
    /// Zero when `other ⊆ self`; infinite when `other` is unbounded in some
    /// facet direction.
    pub fn excess_over(&self, other: &Polytope) -> Result<f64> {
        self.check_dim(other.dim())?;
        let mut worst: f64 = 0.0;
        for i in 0..self.n_facets() {
            let a = self.normals.row(i).transpose();
            match other.support(&a)? {
                Support::Bounded { value, .. } => worst = worst.max(value - self.offsets[i]),
                Support::Unbounded => return Ok(f64::INFINITY),
                Support::Empty => return Ok(0.0),
            }
        }
        Ok(worst)
    }

    /// Drops duplicate and LP-implied facets. Empty input yields the
    /// canonical empty set.
    pub fn remove_redundancy(&self) -> Result<Polytope> {
        if self.is_empty()? {
            return Ok(Self::empty(self.dim()));
        }
        let mut rows = dedupe(self.rows());
        let mut i = 0;
        while i < rows.len() {
            let (a, b) = rows[i].clone();
            let rest: Vec<_> = rows
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, r)| r.clone())
                .collect();
            let others = Self::from_unit_rows(self.dim(), &rest);
            let redundant = match others.support(&a)? {
                Support::Bounded { value, .. } => value <= b + TOL_GEOM,
                Support::Unbounded => false,
                Support::Empty => true,
            };
            if redundant {
                rows.remove(i);
            } else {
                i += 1;
            }
        }
        Ok(Self::from_unit_rows(self.dim(), &rows))
    }

    /// `{x : R x ∈ self}` where `R` has `self.dim()` rows.
    pub fn affine_preimage(&self, r: &DMatrix<f64>) -> Result<Polytope> {
        self.check_dim(r.nrows())?;
        Self::new(&self.normals * r, self.offsets.clone())
    }

    /// `{R x : x ∈ self}` where `R` has `self.dim()` columns.
    pub fn linear_image(&self, r: &DMatrix<f64>) -> Result<Polytope> {
        self.check_dim(r.ncols())?;
        if !self.is_bounded()? {
            return Err(GeometryError::Unbounded);
        }
        let (k, d) = r.shape();
        if self.is_empty()? {
            return Ok(Self::empty(k));
        }
        // {(y, x) : y = R x, x ∈ self}, then eliminate x.
        let m = self.n_facets();
        let mut normals = DMatrix::zeros(2 * k + m, k + d);
        let mut offsets = DVector::zeros(2 * k + m);
        for i in 0..k {
            normals[(2 * i, i)] = 1.0;
            normals[(2 * i + 1, i)] = -1.0;
            for j in 0..d {
                normals[(2 * i, k + j)] = -r[(i, j)];
                normals[(2 * i + 1, k + j)] = r[(i, j)];
            }
        }
        normals.view_mut((2 * k, k), (m, d)).copy_from(&self.normals);
        offsets.rows_mut(2 * k, m).copy_from(&self.offsets);
        Self::new(normals, offsets)?.project(&(0..k).collect::<Vec<_>>())
    }

    /// `{p + q : p ∈ self, q ∈ other}`.
    pub fn minkowski_sum(&self, other: &Polytope) -> Result<Polytope> {
        self.check_dim(other.dim())?;
        if !self.is_bounded()? || !other.is_bounded()? {
            return Err(GeometryError::Unbounded);
        }
        let d = self.dim();
        if self.is_empty()? || other.is_empty()? {
            return Ok(Self::empty(d));
        }
        // {(z, y) : z − y ∈ self, y ∈ other}, then eliminate y.
        let (mp, mq) = (self.n_facets(), other.n_facets());
        let mut normals = DMatrix::zeros(mp + mq, 2 * d);
        let mut offsets = DVector::zeros(mp + mq);
        normals.view_mut((0, 0), (mp, d)).copy_from(&self.normals);
        normals.view_mut((0, d), (mp, d)).copy_from(&(-&self.normals));
        normals.view_mut((mp, d), (mq, d)).copy_from(&other.normals);
        offsets.rows_mut(0, mp).copy_from(&self.offsets);
        offsets.rows_mut(mp, mq).copy_from(&other.offsets);
        Self::new(normals, offsets)?.project(&(0..d).collect::<Vec<_>>())
    }

    /// `{x + v : x ∈ self}`
    pub fn translate(&self, v: &DVector<f64>) -> Result<Polytope> {
        self.check_dim(v.len())?;
        let offsets = &self.offsets + &self.normals * v;
        Ok(Self { normals: self.normals.clone(), offsets, vertices: OnceLock::new() })
    }

    /// Cartesian product `self × other`.
    pub fn product(&self, other: &Polytope) -> Polytope {
        let (d1, d2) = (self.dim(), other.dim());
        let mut rows = Vec::with_capacity(self.n_facets() + other.n_facets());
        for (a, b) in self.rows() {
            let mut full = DVector::zeros(d1 + d2);
            full.rows_mut(0, d1).copy_from(&a);
            rows.push((full, b));
        }
        for (a, b) in other.rows() {
            let mut full = DVector::zeros(d1 + d2);
            full.rows_mut(d1, d2).copy_from(&a);
            rows.push((full, b));
        }
        Self::from_unit_rows(d1 + d2, &rows)
    }

    /// Re-expresses the set in a `total`-dimensional space where coordinate
    /// `i` of `self` becomes coordinate `coords[i]`; other coordinates are
    /// unconstrained.
    pub fn embed(&self, total: usize, coords: &[usize]) -> Result<Polytope> {
        self.check_dim(coords.len())?;
        if let Some(&bad) = coords.iter().find(|&&c| c >= total) {
            return Err(GeometryError::BadIndex { index: bad, dim: total });
        }
        let rows: Vec<_> = self
            .rows()
            .into_iter()
            .map(|(a, b)| {
                let mut full = DVector::zeros(total);
                for (i, &c) in coords.iter().enumerate() {
                    full[c] = a[i];
                }
                (full, b)
            })
            .collect();
        Ok(Self::from_unit_rows(total, &rows))
    }

    /// Orthogonal projection onto the coordinates in `keep` (in that order).
    pub fn project(&self, keep: &[usize]) -> Result<Polytope> {
        if keep.is_empty() {
            return Err(GeometryError::EmptySelection);
        }
        let d = self.dim();
        if let Some(&bad) = keep.iter().find(|&&k| k >= d) {
            return Err(GeometryError::BadIndex { index: bad, dim: d });
        }
        if self.is_empty()? {
            return Ok(Self::empty(keep.len()));
        }
        // Track which original coordinate each current column holds.
        let mut labels: Vec<usize> = (0..d).collect();
        let mut current = self.remove_redundancy()?;
        loop {
            let candidates: Vec<usize> =
                (0..labels.len()).filter(|&c| !keep.contains(&labels[c])).collect();
            if candidates.is_empty() {
                break;
            }
            let col = *candidates
                .iter()
                .min_by_key(|&&c| current.elimination_cost(c))
                .expect("nonempty");
            current = current.eliminate(col)?;
            labels.remove(col);
        }
        let perm: Vec<usize> = keep
            .iter()
            .map(|k| labels.iter().position(|l| l == k).expect("kept label"))
            .collect();
        let mut normals = DMatrix::zeros(current.n_facets(), keep.len());
        for (new_c, &old_c) in perm.iter().enumerate() {
            normals.set_column(new_c, &current.normals.column(old_c));
        }
        Ok(Self { normals, offsets: current.offsets.clone(), vertices: OnceLock::new() })
    }

    fn elimination_cost(&self, col: usize) -> i64 {
        let (mut p, mut n) = (0i64, 0i64);
        for i in 0..self.n_facets() {
            let v = self.normals[(i, col)];
            if v > ZERO_COEF {
                p += 1;
            } else if v < -ZERO_COEF {
                n += 1;
            }
        }
        p * n - p - n
    }

    /// One Fourier–Motzkin step removing column `col`, followed by
    /// redundancy removal. The result has dimension `dim − 1`.
    pub fn eliminate(&self, col: usize) -> Result<Polytope> {
        let d = self.dim();
        if col >= d {
            return Err(GeometryError::BadIndex { index: col, dim: d });
        }
        if d == 1 {
            return Err(GeometryError::EmptySelection);
        }
        let drop_col = |a: &DVector<f64>| -> DVector<f64> {
            DVector::from_iterator(d - 1, (0..d).filter(|&j| j != col).map(|j| a[j]))
        };
        let rows = self.rows();
        let (mut pos, mut neg, mut out) = (Vec::new(), Vec::new(), Vec::new());
        for (a, b) in rows {
            let v = a[col];
            if v > ZERO_COEF {
                pos.push((a / v, b / v));
            } else if v < -ZERO_COEF {
                let s = -v;
                neg.push((a / s, b / s));
            } else {
                out.push((drop_col(&a), b));
            }
        }
        for (ap, bp) in &pos {
            for (an, bn) in &neg {
                let scale = ap.norm() + an.norm();
                let combo = drop_col(&(ap + an));
                let off = bp + bn;
                let norm = combo.norm();
                if norm <= 1e-9 * scale {
                    if off < -TOL_GEOM * scale {
                        return Ok(Self::empty(d - 1));
                    }
                    continue;
                }
                out.push((combo / norm, off / norm));
            }
        }
        // Rows of `out` built from zero-coefficient rows are already unit.
        let normalized: Vec<_> = out
            .into_iter()
            .filter_map(|(a, b)| {
                let n = a.norm();
                (n > ZERO_COEF).then(|| (a / n, b / n))
            })
            .collect();
        Self::from_unit_rows(d - 1, &normalized).remove_redundancy()
    }

    /// Vertex list of a bounded polytope by enumerating `dim`-subsets of
    /// facets. Intended for small instances (oracles and plotting).
    pub fn vertices(&self) -> Result<Vec<DVector<f64>>> {
        if let Some(v) = self.vertices.get() {
            return Ok(v.clone());
        }
        if !self.is_bounded()? {
            return Err(GeometryError::Unbounded);
        }
        let found = if self.is_empty()? { Vec::new() } else { self.enumerate_vertices() };
        let _ = self.vertices.set(found.clone());
        Ok(found)
    }

    fn enumerate_vertices(&self) -> Vec<DVector<f64>> {
        let d = self.dim();
        let m = self.n_facets();
        let mut out: Vec<DVector<f64>> = Vec::new();
        let mut idx: Vec<usize> = (0..d).collect();
        if m < d {
            return out;
        }
        loop {
            let a = DMatrix::from_fn(d, d, |r, c| self.normals[(idx[r], c)]);
            let b = DVector::from_fn(d, |r, _| self.offsets[idx[r]]);
            let lu = a.clone().lu();
            if lu.determinant().abs() > 1e-12 {
                if let Some(x) = lu.solve(&b) {
                    if self.contains_point(&x, 1e-9) && !out.iter().any(|v| (v - &x).amax() < 1e-8) {
                        out.push(x);
                    }
                }
            }
            // Next combination in lexicographic order.
            let mut k = d;
            loop {
                if k == 0 {
                    return out;
                }
                k -= 1;
                if idx[k] < m - d + k {
                    idx[k] += 1;
                    for j in k + 1..d {
                        idx[j] = idx[j - 1] + 1;
                    }
                    break;
                }
            }
        }
    }

    /// Plain-text dump: one facet per line, normal components then offset,
    /// 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for i in 0..self.n_facets() {
            let mut first = true;
            for v in self.normals.row(i).iter().chain(std::iter::once(&self.offsets[i])) {
                if !first {
                    s.push(' ');
                }
                first = false;
                let _ = write!(s, "{v:.16e}");
            }
            s.push('\n');
        }
        s
    }
}

fn dedupe(rows: Vec<(DVector<f64>, f64)>) -> Vec<(DVector<f64>, f64)> {
    let mut out: Vec<(DVector<f64>, f64)> = Vec::with_capacity(rows.len());
    'next: for (a, b) in rows {
        for (oa, ob) in out.iter_mut() {
            if (&*oa - &a).amax() <= DUP_TOL {
                *ob = ob.min(b);
                continue 'next;
            }
        }
        out.push((a, b));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    fn unit_box(d: usize) -> Polytope {
        Polytope::from_bounds(&DVector::from_element(d, -1.0), &DVector::from_element(d, 1.0)).unwrap()
    }

    #[test]
    fn box_has_expected_vertices() {
        let p = unit_box(2);
        assert_eq!(p.n_facets(), 4);
        let mut v = p.vertices().unwrap();
        v.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap().then(a[1].partial_cmp(&b[1]).unwrap()));
        assert_eq!(v.len(), 4);
        assert!((&v[0] - vec(&[-1.0, -1.0])).amax() < 1e-12);
        assert!((&v[3] - vec(&[1.0, 1.0])).amax() < 1e-12);
    }

    #[test]
    fn point_box_membership() {
        let z = vec(&[0.0, 0.0]);
        let p = Polytope::from_bounds(&z, &z).unwrap();
        assert!(p.contains_point(&z, TOL_GEOM));
        assert!(!p.contains_point(&vec(&[1e-6, 0.0]), TOL_GEOM));
        assert!(!p.is_empty().unwrap());
    }

    #[test]
    fn inverted_bounds_rejected() {
        assert_eq!(
            Polytope::from_bounds(&vec(&[0.0, 1.0]), &vec(&[1.0, 0.0])).unwrap_err(),
            GeometryError::InvertedBounds(1)
        );
    }

    #[test]
    fn interval_intersection() {
        let a = Polytope::from_bounds(&vec(&[0.0]), &vec(&[2.0])).unwrap();
        let b = Polytope::from_bounds(&vec(&[1.0]), &vec(&[3.0])).unwrap();
        let c = Polytope::from_bounds(&vec(&[1.0]), &vec(&[2.0])).unwrap();
        assert!(a.intersect(&b).unwrap().set_equal(&c).unwrap());
        assert!(a.intersect(&a).unwrap().set_equal(&a).unwrap());
        assert!(a.contains(&a).unwrap());
    }

    #[test]
    fn empty_detection_and_canonical_form() {
        let a = Polytope::from_bounds(&vec(&[0.0]), &vec(&[1.0])).unwrap();
        let b = Polytope::from_bounds(&vec(&[2.0]), &vec(&[3.0])).unwrap();
        let e = a.intersect(&b).unwrap();
        assert!(e.is_empty().unwrap());
        let r = e.remove_redundancy().unwrap();
        assert_eq!(r.n_facets(), 2);
        assert!(a.contains(&e).unwrap());
        assert!(!e.contains(&a).unwrap());
    }

    #[test]
    fn zero_row_handling() {
        let n = DMatrix::from_row_slice(1, 2, &[0.0, 0.0]);
        assert!(!Polytope::new(n.clone(), vec(&[1.0])).unwrap().is_empty().unwrap());
        assert!(Polytope::new(n, vec(&[-1.0])).unwrap().is_empty().unwrap());
    }

    #[test]
    fn rows_are_normalized() {
        let p = Polytope::new(DMatrix::from_row_slice(1, 2, &[3.0, 4.0]), vec(&[10.0])).unwrap();
        assert!((p.normals().row(0).norm() - 1.0).abs() < 1e-15);
        assert!((p.offsets()[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn redundancy_removal_drops_implied_rows() {
        let mut rows = unit_box(2).rows();
        rows.push((vec(&[1.0, 1.0]) / 2f64.sqrt(), 5.0));
        rows.push((vec(&[1.0, 0.0]), 1.0));
        let p = Polytope::from_unit_rows(2, &rows);
        let r = p.remove_redundancy().unwrap();
        assert_eq!(r.n_facets(), 4);
        assert!(r.set_equal(&p).unwrap());
    }

    #[test]
    fn preimage_scaling() {
        let p = unit_box(2);
        let r = DMatrix::identity(2, 2) * 2.0;
        let q = p.affine_preimage(&r).unwrap();
        let half = Polytope::from_bounds(&vec(&[-0.5, -0.5]), &vec(&[0.5, 0.5])).unwrap();
        assert!(q.set_equal(&half).unwrap());
        assert!(p.affine_preimage(&DMatrix::identity(2, 2)).unwrap().set_equal(&p).unwrap());
    }

    #[test]
    fn box_minkowski_sum() {
        let a = unit_box(2);
        let b = Polytope::from_bounds(&vec(&[-0.5, -0.5]), &vec(&[0.5, 0.5])).unwrap();
        let s = a.minkowski_sum(&b).unwrap();
        let want = Polytope::from_bounds(&vec(&[-1.5, -1.5]), &vec(&[1.5, 1.5])).unwrap();
        assert!(s.set_equal(&want).unwrap());
        let origin = Polytope::from_bounds(&vec(&[0.0, 0.0]), &vec(&[0.0, 0.0])).unwrap();
        assert!(a.minkowski_sum(&origin).unwrap().set_equal(&a).unwrap());
    }

    #[test]
    fn minkowski_rejects_unbounded() {
        let half = Polytope::new(DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), vec(&[0.0])).unwrap();
        assert_eq!(unit_box(2).minkowski_sum(&half).unwrap_err(), GeometryError::Unbounded);
        assert_eq!(half.linear_image(&DMatrix::identity(2, 2)).unwrap_err(), GeometryError::Unbounded);
    }

    #[test]
    fn projection_of_box_and_interval_example() {
        let p = unit_box(3).project(&[0, 1]).unwrap();
        assert!(p.set_equal(&unit_box(2)).unwrap());
        // {(x,u): |x + 0.5u| ≤ 1, |u| ≤ 1} → |x| ≤ 1.5
        let n = DMatrix::from_row_slice(4, 2, &[1.0, 0.5, -1.0, -0.5, 0.0, 1.0, 0.0, -1.0]);
        let q = Polytope::new(n, vec(&[1.0, 1.0, 1.0, 1.0])).unwrap().project(&[0]).unwrap();
        let want = Polytope::from_bounds(&vec(&[-1.5]), &vec(&[1.5])).unwrap();
        assert!(q.set_equal(&want).unwrap());
    }

    #[test]
    fn projection_onto_all_coordinates_reorders() {
        let p = Polytope::from_bounds(&vec(&[0.0, 10.0]), &vec(&[1.0, 20.0])).unwrap();
        assert!(p.project(&[0, 1]).unwrap().set_equal(&p).unwrap());
        let swapped = p.project(&[1, 0]).unwrap();
        let want = Polytope::from_bounds(&vec(&[10.0, 0.0]), &vec(&[20.0, 1.0])).unwrap();
        assert!(swapped.set_equal(&want).unwrap());
    }

    #[test]
    fn linear_image_zero_map_is_origin() {
        let img = unit_box(2).linear_image(&DMatrix::zeros(2, 2)).unwrap();
        let origin = Polytope::from_bounds(&vec(&[0.0, 0.0]), &vec(&[0.0, 0.0])).unwrap();
        assert!(img.set_equal(&origin).unwrap());
        assert!(unit_box(2).linear_image(&DMatrix::identity(2, 2)).unwrap().set_equal(&unit_box(2)).unwrap());
    }

    #[test]
    fn from_vertices_triangle() {
        let pts = vec![vec(&[0.0, 0.0]), vec(&[1.0, 0.0]), vec(&[0.0, 1.0]), vec(&[0.2, 0.2])];
        let t = Polytope::from_vertices(2, &pts).unwrap();
        assert_eq!(t.n_facets(), 3);
        assert!(t.contains_point(&vec(&[0.5, 0.5]), 1e-9));
        assert!(!t.contains_point(&vec(&[0.6, 0.6]), 1e-9));
    }

    #[test]
    fn chebyshev_of_box_and_halfspace() {
        let p = Polytope::from_bounds(&vec(&[0.0, 0.0]), &vec(&[4.0, 2.0])).unwrap();
        let (c, r) = p.chebyshev_center().unwrap();
        assert!((r - 1.0).abs() < 1e-12);
        assert!((c[1] - 1.0).abs() < 1e-12);
        let half = Polytope::new(DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), vec(&[0.0])).unwrap();
        assert!(half.chebyshev_center().unwrap().1.is_infinite());
        assert!(!half.is_bounded().unwrap());
    }

    #[test]
    fn text_dump_has_one_line_per_facet() {
        let t = unit_box(2).to_text();
        assert_eq!(t.lines().count(), 4);
        assert!(t.lines().next().unwrap().starts_with("1.0000000000000000e0 0.0000000000000000e0"));
    }

    #[test]
    fn product_and_embed() {
        let a = Polytope::from_bounds(&vec(&[0.0]), &vec(&[1.0])).unwrap();
        let b = Polytope::from_bounds(&vec(&[2.0]), &vec(&[3.0])).unwrap();
        let p = a.product(&b);
        let want = Polytope::from_bounds(&vec(&[0.0, 2.0]), &vec(&[1.0, 3.0])).unwrap();
        assert!(p.set_equal(&want).unwrap());
        let e = b.embed(2, &[0]).unwrap().intersect(&a.embed(2, &[1]).unwrap()).unwrap();
        let want = Polytope::from_bounds(&vec(&[2.0, 0.0]), &vec(&[3.0, 1.0])).unwrap();
        assert!(e.set_equal(&want).unwrap());
    }
}
