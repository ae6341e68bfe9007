//! Dense two-phase simplex for `max cᵀx s.t. Ax ≤ b` with free `x`.
//!
//! The primal has few variables and many rows, so the solver works on the
//! dual `min bᵀy s.t. Aᵀy = c, y ≥ 0`, whose tableau has one row per primal
//! variable. Entering and leaving choices follow Bland's rule. The primal
//! point is read off the reduced costs of the phase-1 artificial columns.

use nalgebra::{DMatrix, DVector};

const PIVOT_TOL: f64 = 1e-10;
const COST_TOL: f64 = 1e-10;
const FEAS_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub enum LpOutcome {
    Optimal { x: DVector<f64>, value: f64 },
    Unbounded,
    Infeasible,
    /// Pivot budget exhausted. Not expected with Bland's rule; kept so that
    /// callers never hang on pathological floating-point cycling.
    IterationLimit,
}

impl LpOutcome {
    pub fn value(&self) -> Option<f64> {
        match self {
            LpOutcome::Optimal { value, .. } => Some(*value),
            _ => None,
        }
    }
}

/// Maximizes `cᵀx` over `{x : Ax ≤ b}`.
pub fn maximize(c: &DVector<f64>, a: &DMatrix<f64>, b: &DVector<f64>) -> LpOutcome {
    assert_eq!(a.ncols(), c.len(), "objective length must match column count");
    assert_eq!(a.nrows(), b.len(), "offset length must match row count");
    match solve_dual(c, a, b) {
        Raw::Optimal(x, v) => LpOutcome::Optimal { x, value: v },
        Raw::DualUnbounded => LpOutcome::Infeasible,
        Raw::Stalled => LpOutcome::IterationLimit,
        Raw::DualInfeasible => match max_slack(a, b, 1.0) {
            Some((_, t)) if t >= -FEAS_TOL => LpOutcome::Unbounded,
            Some(_) => LpOutcome::Infeasible,
            None => LpOutcome::IterationLimit,
        },
    }
}

/// Solves `max t s.t. a_iᵀx + s_i t ≤ b_i, t ≤ cap` with `s_i = ‖a_i‖`.
///
/// With `s_i = 1` this is the feasibility margin; with row norms it is the
/// Chebyshev ball radius. The dual of this program is always feasible, so
/// the only non-optimal return is a stall.
pub fn max_slack(a: &DMatrix<f64>, b: &DVector<f64>, cap: f64) -> Option<(DVector<f64>, f64)> {
    max_slack_weighted(a, b, &DVector::from_element(a.nrows(), 1.0), cap)
}

pub fn max_slack_weighted(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    weights: &DVector<f64>,
    cap: f64,
) -> Option<(DVector<f64>, f64)> {
    let (m, n) = a.shape();
    let mut aa = DMatrix::zeros(m + 1, n + 1);
    aa.view_mut((0, 0), (m, n)).copy_from(a);
    for i in 0..m {
        aa[(i, n)] = weights[i];
    }
    aa[(m, n)] = 1.0;
    let mut bb = DVector::zeros(m + 1);
    bb.rows_mut(0, m).copy_from(b);
    bb[m] = cap;
    let mut c = DVector::zeros(n + 1);
    c[n] = 1.0;
    match solve_dual(&c, &aa, &bb) {
        Raw::Optimal(x, v) => Some((x.rows(0, n).into_owned(), v)),
        _ => None,
    }
}

enum Raw {
    Optimal(DVector<f64>, f64),
    DualInfeasible,
    DualUnbounded,
    Stalled,
}

struct Tableau {
    /// rows × (m + n + 1); last column is the right-hand side.
    t: Vec<Vec<f64>>,
    basis: Vec<usize>,
    m: usize,
    n: usize,
}

impl Tableau {
    fn rhs(&self, r: usize) -> f64 {
        self.t[r][self.m + self.n]
    }

    fn pivot(&mut self, row: usize, col: usize, cost: &mut [f64]) {
        let width = self.m + self.n + 1;
        let p = self.t[row][col];
        for v in self.t[row].iter_mut() {
            *v /= p;
        }
        self.t[row][col] = 1.0;
        let pivot_row = self.t[row].clone();
        for (r, line) in self.t.iter_mut().enumerate() {
            if r == row {
                continue;
            }
            let f = line[col];
            if f != 0.0 {
                for j in 0..width {
                    line[j] -= f * pivot_row[j];
                }
                line[col] = 0.0;
            }
        }
        let f = cost[col];
        if f != 0.0 {
            for j in 0..width {
                cost[j] -= f * pivot_row[j];
            }
            cost[col] = 0.0;
        }
        self.basis[row] = col;
    }

    /// Runs simplex iterations minimizing the given reduced-cost row. Only
    /// columns `< allowed` may enter.
    fn run(&mut self, cost: &mut [f64], allowed: usize, budget: &mut usize) -> Result<(), Raw> {
        loop {
            let entering = (0..allowed).find(|&j| cost[j] < -COST_TOL);
            let Some(col) = entering else { return Ok(()) };
            let mut best: Option<(usize, f64)> = None;
            for r in 0..self.t.len() {
                let e = self.t[r][col];
                if e > PIVOT_TOL {
                    let ratio = self.rhs(r).max(0.0) / e;
                    best = match best {
                        None => Some((r, ratio)),
                        Some((br, bv)) => {
                            if ratio < bv - 1e-12
                                || (ratio <= bv + 1e-12 && self.basis[r] < self.basis[br])
                            {
                                Some((r, ratio))
                            } else {
                                Some((br, bv))
                            }
                        }
                    };
                }
            }
            let Some((row, _)) = best else { return Err(Raw::DualUnbounded) };
            if *budget == 0 {
                return Err(Raw::Stalled);
            }
            *budget -= 1;
            self.pivot(row, col, cost);
        }
    }
}

fn solve_dual(c: &DVector<f64>, a: &DMatrix<f64>, b: &DVector<f64>) -> Raw {
    let (m, n) = a.shape();
    let width = m + n + 1;
    let mut sign = vec![1.0; n];
    let mut t = vec![vec![0.0; width]; n];
    for r in 0..n {
        sign[r] = if c[r] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..m {
            t[r][j] = sign[r] * a[(j, r)];
        }
        t[r][m + r] = 1.0;
        t[r][m + n] = sign[r] * c[r];
    }
    let mut tab = Tableau { t, basis: (m..m + n).collect(), m, n };
    let mut budget = 50 * (m + n) + 1000;

    // Phase 1: minimize the sum of artificials.
    let mut cost = vec![0.0; width];
    for r in 0..n {
        for j in 0..m {
            cost[j] -= tab.t[r][j];
        }
        cost[m + n] -= tab.t[r][m + n];
    }
    match tab.run(&mut cost, m, &mut budget) {
        Ok(()) => {}
        Err(Raw::Stalled) => return Raw::Stalled,
        // Phase 1 is bounded below by zero.
        Err(_) => return Raw::Stalled,
    }
    let scale = 1.0 + c.amax();
    if -cost[m + n] > FEAS_TOL * scale {
        return Raw::DualInfeasible;
    }

    // Drive remaining artificials out of the basis where possible.
    for r in 0..n {
        if tab.basis[r] >= m {
            if let Some(col) = (0..m).find(|&j| tab.t[r][j].abs() > 1e-9) {
                let mut dummy = vec![0.0; width];
                tab.pivot(r, col, &mut dummy);
            }
        }
    }

    // Phase 2 with the true costs.
    let mut cost = vec![0.0; width];
    for j in 0..m {
        cost[j] = b[j];
    }
    for r in 0..n {
        let bc = tab.basis[r];
        if bc < m {
            let cb = b[bc];
            for j in 0..width {
                cost[j] -= cb * tab.t[r][j];
            }
        }
    }
    for r in 0..n {
        let bc = tab.basis[r];
        cost[bc] = 0.0;
    }
    if let Err(e) = tab.run(&mut cost, m, &mut budget) {
        return e;
    }

    let mut x = DVector::zeros(n);
    for k in 0..n {
        x[k] = -sign[k] * cost[m + k];
    }
    let mut value = 0.0;
    for r in 0..n {
        let bc = tab.basis[r];
        if bc < m {
            value += b[bc] * tab.rhs(r).max(0.0);
        }
    }
    Raw::Optimal(x, value)
}
