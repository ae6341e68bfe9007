//! Dense strictly convex QP `min ½xᵀHx + fᵀx s.t. Ax ≤ b` solved with the
//! Goldfarb–Idnani dual active-set method.
//!
//! The Cholesky factor of `H` is computed once per [`QpFactor`] so that a
//! controller can reuse it across many right-hand sides and constraint sets.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::lp;

const VIOLATION_TOL: f64 = 1e-10;
const DIRECTION_EPS: f64 = 1e-14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("Hessian is not positive definite")]
    NotPositiveDefinite,
    #[error("dimension mismatch: {0}")]
    Dimension(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// One multiplier per inequality row, zero for inactive rows.
    pub lambda: DVector<f64>,
    pub value: f64,
    pub status: QpStatus,
    pub iterations: usize,
    pub kkt_residual: f64,
}

#[derive(Debug, Clone)]
pub struct QpFactor {
    h: DMatrix<f64>,
    /// `L⁻ᵀ` with `H = LLᵀ`.
    j0: DMatrix<f64>,
}

impl QpFactor {
    pub fn new(h: &DMatrix<f64>) -> Result<Self, QpError> {
        if !h.is_square() {
            return Err(QpError::Dimension("Hessian must be square"));
        }
        let sym = (h + h.transpose()) * 0.5;
        let chol = sym.clone().cholesky().ok_or(QpError::NotPositiveDefinite)?;
        let n = h.nrows();
        let l_inv = chol
            .l()
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .ok_or(QpError::NotPositiveDefinite)?;
        Ok(Self { h: sym, j0: l_inv.transpose() })
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn solve(&self, f: &DVector<f64>, a: &DMatrix<f64>, b: &DVector<f64>) -> Result<QpSolution, QpError> {
        let n = self.dim();
        if f.len() != n || a.ncols() != n {
            return Err(QpError::Dimension("linear term or constraint width"));
        }
        if a.nrows() != b.len() {
            return Err(QpError::Dimension("constraint rows and offsets"));
        }
        let mut s = solve_gi(self, f, a, b);
        if s.status == QpStatus::Infeasible {
            // Confirm with an LP; a feasible set here means numerical trouble.
            let confirmed = match lp::max_slack(a, b, 1.0) {
                Some((_, t)) => t < -1e-9,
                None => false,
            };
            if !confirmed {
                s.status = QpStatus::MaxIter;
            }
        }
        s.kkt_residual = kkt_residual(&self.h, f, a, b, &s.x, &s.lambda);
        Ok(s)
    }
}

pub fn solve(h: &DMatrix<f64>, f: &DVector<f64>, a: &DMatrix<f64>, b: &DVector<f64>) -> Result<QpSolution, QpError> {
    QpFactor::new(h)?.solve(f, a, b)
}

/// Max of stationarity, primal infeasibility, complementarity and dual
/// infeasibility.
pub fn kkt_residual(
    h: &DMatrix<f64>,
    f: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    x: &DVector<f64>,
    lambda: &DVector<f64>,
) -> f64 {
    let stat = (h * x + f + a.transpose() * lambda).amax();
    let slack = a * x - b;
    let mut worst = stat;
    for i in 0..b.len() {
        worst = worst.max(slack[i].max(0.0));
        worst = worst.max((lambda[i] * slack[i]).abs());
        worst = worst.max((-lambda[i]).max(0.0));
    }
    worst
}

struct ActiveSet {
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    idx: Vec<usize>,
    u: Vec<f64>,
}

impl ActiveSet {
    fn q(&self) -> usize {
        self.idx.len()
    }

    /// Appends a constraint whose transformed normal is `d = Jᵀn`.
    fn add(&mut self, mut d: DVector<f64>, row: usize, mult: f64) {
        let n = d.len();
        let q = self.q();
        for k in (q + 1..n).rev() {
            let (x, y) = (d[k - 1], d[k]);
            if y == 0.0 {
                continue;
            }
            let h = x.hypot(y);
            let (c, s) = (x / h, y / h);
            d[k - 1] = h;
            d[k] = 0.0;
            rotate_columns(&mut self.j, k - 1, k, c, s);
        }
        for i in 0..=q {
            self.r[(i, q)] = d[i];
        }
        self.idx.push(row);
        self.u.push(mult);
    }

    fn drop(&mut self, l: usize) {
        let q = self.q();
        for c in l..q - 1 {
            for i in 0..q {
                self.r[(i, c)] = self.r[(i, c + 1)];
            }
        }
        for i in 0..q {
            self.r[(i, q - 1)] = 0.0;
        }
        for jj in l..q - 1 {
            let (x, y) = (self.r[(jj, jj)], self.r[(jj + 1, jj)]);
            if y == 0.0 {
                continue;
            }
            let h = x.hypot(y);
            let (c, s) = (x / h, y / h);
            for k in jj..q - 1 {
                let (a, b) = (self.r[(jj, k)], self.r[(jj + 1, k)]);
                self.r[(jj, k)] = c * a + s * b;
                self.r[(jj + 1, k)] = -s * a + c * b;
            }
            self.r[(jj + 1, jj)] = 0.0;
            rotate_columns(&mut self.j, jj, jj + 1, c, s);
        }
        self.idx.remove(l);
        self.u.remove(l);
    }

    /// `R⁻¹ d[..q]` by back substitution.
    fn r_solve(&self, d: &DVector<f64>) -> Vec<f64> {
        let q = self.q();
        let mut out = vec![0.0; q];
        for i in (0..q).rev() {
            let mut s = d[i];
            for k in i + 1..q {
                s -= self.r[(i, k)] * out[k];
            }
            out[i] = s / self.r[(i, i)];
        }
        out
    }
}

fn rotate_columns(m: &mut DMatrix<f64>, a: usize, b: usize, c: f64, s: f64) {
    for k in 0..m.nrows() {
        let (x, y) = (m[(k, a)], m[(k, b)]);
        m[(k, a)] = c * x + s * y;
        m[(k, b)] = -s * x + c * y;
    }
}

fn solve_gi(factor: &QpFactor, f: &DVector<f64>, a: &DMatrix<f64>, b: &DVector<f64>) -> QpSolution {
    let n = factor.dim();
    let m = a.nrows();
    // Constraints are handled as nᵢᵀx ≥ bᵢ' with nᵢ = −aᵢ, bᵢ' = −bᵢ.
    let normal = |i: usize| -> DVector<f64> { -a.row(i).transpose() };
    let slack = |i: usize, x: &DVector<f64>| -> f64 { b[i] - a.row(i).dot(&x.transpose()) };
    let scale = |i: usize| 1.0 + b[i].abs();

    let mut set = ActiveSet { j: factor.j0.clone(), r: DMatrix::zeros(n, n), idx: Vec::new(), u: Vec::new() };
    let mut x = -(&set.j * (set.j.transpose() * f));
    let max_iter = 10 * (m + n) + 100;
    let mut iterations = 0;

    let finish = |x: DVector<f64>, set: &ActiveSet, status: QpStatus, iterations: usize| {
        let mut lambda = DVector::zeros(m);
        for (k, &i) in set.idx.iter().enumerate() {
            lambda[i] = set.u[k];
        }
        let value = 0.5 * x.dot(&(&factor.h * &x)) + f.dot(&x);
        QpSolution { x, lambda, value, status, iterations, kkt_residual: f64::NAN }
    };

    loop {
        // Most violated inactive constraint, measured relative to its scale.
        let mut pick: Option<(usize, f64)> = None;
        for i in 0..m {
            if set.idx.contains(&i) {
                continue;
            }
            let s = slack(i, &x) / scale(i);
            if s < -VIOLATION_TOL && pick.is_none_or(|(_, v)| s < v) {
                pick = Some((i, s));
            }
        }
        let Some((p, _)) = pick else {
            return finish(x, &set, QpStatus::Optimal, iterations);
        };
        let np = normal(p);
        let mut u_new = 0.0;

        loop {
            iterations += 1;
            if iterations > max_iter {
                return finish(x, &set, QpStatus::MaxIter, iterations);
            }
            let d = set.j.transpose() * &np;
            let q = set.q();
            let z = if q < n { set.j.columns(q, n - q) * d.rows(q, n - q) } else { DVector::zeros(n) };
            let r = set.r_solve(&d);

            let mut t1 = f64::INFINITY;
            let mut l = None;
            for k in 0..q {
                if r[k] > 0.0 {
                    let t = set.u[k] / r[k];
                    if t < t1 {
                        t1 = t;
                        l = Some(k);
                    }
                }
            }
            let zn = z.dot(&np);
            // slack(p) = bₚ − aₚᵀx is negative while the row is violated.
            let t2 = if z.amax() > DIRECTION_EPS && zn > 0.0 { -slack(p, &x) / zn } else { f64::INFINITY };
            let t = t1.min(t2);

            if !t.is_finite() {
                return finish(x, &set, QpStatus::Infeasible, iterations);
            }
            if !t2.is_finite() {
                // Dual step only.
                for k in 0..q {
                    set.u[k] -= t * r[k];
                }
                u_new += t;
                set.drop(l.expect("partial step index"));
                continue;
            }
            x += &z * t;
            for k in 0..q {
                set.u[k] -= t * r[k];
            }
            u_new += t;
            if t2 <= t1 {
                let d = set.j.transpose() * &np;
                set.add(d, p, u_new);
                break;
            }
            set.drop(l.expect("partial step index"));
        }
    }
}
