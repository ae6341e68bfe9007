//! Linearized collision avoidance and the stacked state/input constraints.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::geometry::{GeometryError, Polytope};
use crate::vehicle::{Bounds, NU, NX};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConstraintError {
    #[error("expected {expected} per-step avoidance lists, got {got}")]
    StepCount { expected: usize, got: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// The three halfplane normals that can be active. The fourth direction,
/// `(−1, 0)`, would constrain against vehicles behind, which never happens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActiveNormal {
    /// `(1, 0)`: neighbour ahead in the same lane.
    Ahead,
    /// `(0, 1)`: neighbour in the lane on the positive-y side.
    PositiveSide,
    /// `(0, −1)`: neighbour in the lane on the negative-y side.
    NegativeSide,
}

impl ActiveNormal {
    pub fn w(self) -> [f64; 2] {
        match self {
            ActiveNormal::Ahead => [1.0, 0.0],
            ActiveNormal::PositiveSide => [0.0, 1.0],
            ActiveNormal::NegativeSide => [0.0, -1.0],
        }
    }
}

/// Picks the halfplane for the relative position `(p_x, p_y)` of a
/// neighbour. `p_x = 0` counts as ahead; `|p_y| = d_eps` counts as same lane.
pub fn active_halfplane(p_x: f64, p_y: f64, d_eps: f64) -> Option<ActiveNormal> {
    if p_x < 0.0 {
        None
    } else if p_y.abs() <= d_eps {
        Some(ActiveNormal::Ahead)
    } else if p_y > d_eps {
        Some(ActiveNormal::PositiveSide)
    } else {
        Some(ActiveNormal::NegativeSide)
    }
}

/// One row `wᵀξ_i ≤ wᵀξ_j − γ` over the full state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AvoidanceRow {
    pub normal: ActiveNormal,
    pub rhs: f64,
    /// Id of the neighbour that produced this row.
    pub source: u32,
}

impl AvoidanceRow {
    pub fn state_row(&self) -> [f64; NX] {
        let w = self.normal.w();
        [w[0], w[1], 0.0, 0.0, 0.0, 0.0]
    }
}

pub fn avoidance_row(w: ActiveNormal, xi_j: [f64; 2], gamma: f64) -> ([f64; NX], f64) {
    let n = w.w();
    ([n[0], n[1], 0.0, 0.0, 0.0, 0.0], n[0] * xi_j[0] + n[1] * xi_j[1] - gamma)
}

/// Tightened upper bound on ξ_x for the first `until_step` prediction steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopLimit {
    pub xi_max: f64,
    pub until_step: usize,
}

#[derive(Debug, Clone)]
pub struct StackedConstraints {
    pub bounds: Bounds,
    /// Avoidance rows for prediction steps `p = 0..=N`.
    pub steps: Vec<Vec<AvoidanceRow>>,
    pub stop: Option<StopLimit>,
}

/// The 12 signed-identity rows: uppers first, then negated lowers.
pub fn box_rows(bounds: &Bounds) -> (DMatrix<f64>, DVector<f64>) {
    let mut f = DMatrix::zeros(2 * NX, NX);
    let mut g = DVector::zeros(2 * NX);
    for i in 0..NX {
        f[(i, i)] = 1.0;
        f[(NX + i, i)] = -1.0;
        g[i] = bounds.state_upper[i];
        g[NX + i] = -bounds.state_lower[i];
    }
    (f, g)
}

pub fn input_rows(bounds: &Bounds) -> (DMatrix<f64>, DVector<f64>) {
    let mut h = DMatrix::zeros(2 * NU, NU);
    let mut g = DVector::zeros(2 * NU);
    for i in 0..NU {
        h[(i, i)] = 1.0;
        h[(NU + i, i)] = -1.0;
        g[i] = bounds.input_upper[i];
        g[NU + i] = -bounds.input_lower[i];
    }
    (h, g)
}

pub fn stack(
    bounds: &Bounds,
    steps: Vec<Vec<AvoidanceRow>>,
    horizon: usize,
    stop: Option<StopLimit>,
) -> Result<StackedConstraints, ConstraintError> {
    if steps.len() != horizon + 1 {
        return Err(ConstraintError::StepCount { expected: horizon + 1, got: steps.len() });
    }
    Ok(StackedConstraints { bounds: *bounds, steps, stop })
}

impl StackedConstraints {
    pub fn horizon(&self) -> usize {
        self.steps.len() - 1
    }

    /// `(H_x, g_x)` at prediction step `p`: avoidance rows over box rows.
    pub fn state_rows(&self, p: usize) -> (DMatrix<f64>, DVector<f64>) {
        let (f, mut g) = box_rows(&self.bounds);
        if let Some(s) = self.stop {
            if p < s.until_step {
                g[0] = g[0].min(s.xi_max);
            }
        }
        let c = &self.steps[p];
        let mut h = DMatrix::zeros(c.len() + 2 * NX, NX);
        let mut gx = DVector::zeros(c.len() + 2 * NX);
        for (r, row) in c.iter().enumerate() {
            h.row_mut(r).copy_from_slice(&row.state_row());
            gx[r] = row.rhs;
        }
        h.view_mut((c.len(), 0), (2 * NX, NX)).copy_from(&f);
        gx.rows_mut(c.len(), 2 * NX).copy_from(&g);
        (h, gx)
    }

    pub fn input_rows(&self) -> (DMatrix<f64>, DVector<f64>) {
        input_rows(&self.bounds)
    }

    pub fn state_set(&self, p: usize) -> Result<Polytope, GeometryError> {
        let (h, g) = self.state_rows(p);
        Polytope::new(h, g)
    }

    pub fn input_set(&self) -> Result<Polytope, GeometryError> {
        let (h, g) = self.input_rows();
        Polytope::new(h, g)
    }

    /// Largest violation of the step-`p` state rows at `x`.
    pub fn state_violation(&self, p: usize, x: &DVector<f64>) -> f64 {
        let (h, g) = self.state_rows(p);
        (h * x - g).max().max(0.0)
    }
}
