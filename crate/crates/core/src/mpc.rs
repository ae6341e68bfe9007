//! Terminal weight, condensed tracking MPC and the shifted-plan witness.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::constraints::StackedConstraints;
use crate::geometry::{GeometryError, Polytope, TOL_GEOM};
use crate::linalg::{is_positive_definite, min_eigenvalue, quad_form};
use crate::qp::{self, QpError, QpFactor, QpStatus};
use crate::vehicle::{ControlInput, DiscreteModel};

pub const DEFAULT_DEFLATION: f64 = 1e-6;
const SDA_MAX_ITER: usize = 200;
/// Scaled KKT residual accepted as optimal.
pub const KKT_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MpcError {
    #[error("Riccati iteration did not converge")]
    RiccatiDiverged,
    #[error("state weight must have a strictly positive diagonal")]
    ZeroStateWeight,
    #[error("input weight must be positive definite")]
    InputWeightNotPd,
    #[error("deflation must lie in (0, 1), got {0}")]
    BadDeflation(f64),
    #[error("terminal weight fails the decrease inequality (min eigenvalue {0:e})")]
    CertificateFailed(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(&'static str),
    #[error("horizon must be at least 1")]
    ZeroHorizon,
    #[error("no admissible terminal input: {0}")]
    InvariantViolation(String),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub p: DMatrix<f64>,
}

/// `AᵀPA − P + Q − AᵀPB(R + BᵀPB)⁻¹BᵀPA`
pub fn riccati_lhs(model: &DiscreteModel, q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> DMatrix<f64> {
    let (a, b) = (&model.a, &model.b);
    let pa = p * a;
    let pb = p * b;
    let s = r + b.transpose() * &pb;
    let k = s.clone().lu().solve(&(b.transpose() * &pa)).expect("R + BᵀPB is nonsingular");
    let out = a.transpose() * &pa - p + q - (a.transpose() * &pb) * k;
    (&out + out.transpose()) * 0.5
}

/// Block matrix `[[AᵀPA − P + Q, AᵀPB], [BᵀPA, R + BᵀPB]]`.
pub fn m_matrix(model: &DiscreteModel, q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> DMatrix<f64> {
    let (a, b) = (&model.a, &model.b);
    let (n, m) = (model.nx(), model.nu());
    let mut out = DMatrix::zeros(n + m, n + m);
    out.view_mut((0, 0), (n, n)).copy_from(&(a.transpose() * p * a - p + q));
    let cross = a.transpose() * p * b;
    out.view_mut((0, n), (n, m)).copy_from(&cross);
    out.view_mut((n, 0), (m, n)).copy_from(&cross.transpose());
    out.view_mut((n, n), (m, m)).copy_from(&(r + b.transpose() * p * b));
    (&out + out.transpose()) * 0.5
}

/// Stabilizing DARE solution by the structure-preserving doubling algorithm.
pub fn solve_dare(model: &DiscreteModel, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>, MpcError> {
    let n = model.nx();
    let r_inv = r.clone().try_inverse().ok_or(MpcError::InputWeightNotPd)?;
    let mut ak = model.a.clone();
    let mut gk = &model.b * r_inv * model.b.transpose();
    let mut hk = q.clone();
    let ident = DMatrix::<f64>::identity(n, n);
    for _ in 0..SDA_MAX_ITER {
        let w = (&ident + &gk * &hk).lu();
        let wa = w.solve(&ak).ok_or(MpcError::RiccatiDiverged)?;
        let wg = w.solve(&gk).ok_or(MpcError::RiccatiDiverged)?;
        let a_next = &ak * &wa;
        let g_next = &gk + &ak * wg * ak.transpose();
        let h_next = &hk + ak.transpose() * &hk * &wa;
        let delta = (&h_next - &hk).amax();
        ak = a_next;
        gk = (&g_next + g_next.transpose()) * 0.5;
        hk = (&h_next + h_next.transpose()) * 0.5;
        if !hk.iter().all(|v| v.is_finite()) {
            return Err(MpcError::RiccatiDiverged);
        }
        if delta <= 1e-15 * hk.amax().max(1.0) {
            return Ok(hk);
        }
    }
    Err(MpcError::RiccatiDiverged)
}

/// Terminal weight from the DARE with the deflated state weight
/// `(1 − ε)Q`, so that the decrease inequality holds with margin `εQ`.
pub fn terminal_weight(model: &DiscreteModel, q: &DMatrix<f64>, r: &DMatrix<f64>, eps: f64) -> Result<DMatrix<f64>, MpcError> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(MpcError::BadDeflation(eps));
    }
    let n = model.nx();
    if q.shape() != (n, n) || r.shape() != (model.nu(), model.nu()) {
        return Err(MpcError::Dimension("weight shapes"));
    }
    let min_diag = q.diagonal().min();
    if !(min_diag > 0.0) {
        return Err(MpcError::ZeroStateWeight);
    }
    if !is_positive_definite(r) {
        return Err(MpcError::InputWeightNotPd);
    }
    let p = solve_dare(model, &(q * (1.0 - eps)), r)?;
    let margin = min_eigenvalue(&riccati_lhs(model, q, r, &p));
    if margin < 0.5 * eps * min_diag {
        return Err(MpcError::CertificateFailed(margin));
    }
    // The smallest eigenvalue of M can sit below eigensolver rounding when
    // εQ is tiny; a successful Cholesky factorization is the sharper test.
    if m_matrix(model, q, r, &p).cholesky().is_none() {
        return Err(MpcError::CertificateFailed(margin));
    }
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

#[derive(Debug, Clone)]
pub struct OpSolution {
    pub inputs: Vec<DVector<f64>>,
    pub states: Vec<DVector<f64>>,
    pub cost: f64,
    pub status: OpStatus,
    pub kkt_residual: f64,
    pub iterations: usize,
}

impl OpSolution {
    pub fn first_input(&self) -> ControlInput {
        ControlInput::from_slice(self.inputs[0].as_slice())
    }
}

/// Tracking cost of a state/input sequence pair.
pub fn sequence_cost(states: &[DVector<f64>], inputs: &[DVector<f64>], x_r: &DVector<f64>, w: &Weights) -> f64 {
    let n = inputs.len();
    let mut j = quad_form(&w.p, &(&states[n] - x_r));
    for p in 0..n {
        j += quad_form(&w.q, &(&states[p] - x_r)) + quad_form(&w.r, &inputs[p]);
    }
    j
}

pub fn rollout(model: &DiscreteModel, x0: &DVector<f64>, inputs: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let mut states = Vec::with_capacity(inputs.len() + 1);
    states.push(x0.clone());
    for u in inputs {
        let next = model.step_vec(states.last().expect("nonempty"), u);
        states.push(next);
    }
    states
}

/// Per-step state rows `H_x(p) x ≤ g_x(p)` for `p = 0..=N` and the shared
/// input rows. Step 0 is kept for bookkeeping; the solver skips it since
/// `x_0` is fixed.
#[derive(Debug, Clone)]
pub struct ProblemConstraints {
    pub state: Vec<(DMatrix<f64>, DVector<f64>)>,
    pub input: (DMatrix<f64>, DVector<f64>),
}

impl ProblemConstraints {
    pub fn from_stacked(s: &StackedConstraints) -> Self {
        Self { state: (0..=s.horizon()).map(|p| s.state_rows(p)).collect(), input: s.input_rows() }
    }

    /// Same state set at every step.
    pub fn uniform(x: &Polytope, u: &Polytope, horizon: usize) -> Self {
        let rows = (x.normals().clone(), x.offsets().clone());
        Self { state: vec![rows; horizon + 1], input: (u.normals().clone(), u.offsets().clone()) }
    }

    pub fn horizon(&self) -> usize {
        self.state.len() - 1
    }
}

/// Condensed (input-only) formulation for a fixed model, weights and
/// horizon. The Hessian factor is computed once.
#[derive(Debug, Clone)]
pub struct Controller {
    pub model: DiscreteModel,
    pub weights: Weights,
    pub horizon: usize,
    /// `A^p` for `p = 0..=N`.
    powers: Vec<DMatrix<f64>>,
    /// Block lower-triangular input-to-state map, `(N+1)·nx × N·nu`.
    gamma: DMatrix<f64>,
    factor: QpFactor,
}

impl Controller {
    pub fn new(model: DiscreteModel, weights: Weights, horizon: usize) -> Result<Self, MpcError> {
        if horizon == 0 {
            return Err(MpcError::ZeroHorizon);
        }
        let (nx, nu) = (model.nx(), model.nu());
        if weights.q.shape() != (nx, nx) || weights.p.shape() != (nx, nx) || weights.r.shape() != (nu, nu) {
            return Err(MpcError::Dimension("weight shapes"));
        }
        let mut powers = vec![DMatrix::identity(nx, nx)];
        for p in 1..=horizon {
            powers.push(&model.a * &powers[p - 1]);
        }
        let mut gamma = DMatrix::zeros((horizon + 1) * nx, horizon * nu);
        for p in 1..=horizon {
            for k in 0..p {
                let blk = &powers[p - 1 - k] * &model.b;
                gamma.view_mut((p * nx, k * nu), (nx, nu)).copy_from(&blk);
            }
        }
        let mut h = DMatrix::zeros(horizon * nu, horizon * nu);
        for p in 1..=horizon {
            let w = if p == horizon { &weights.p } else { &weights.q };
            let g = gamma.rows(p * nx, nx);
            h += g.transpose() * w * g;
        }
        for k in 0..horizon {
            let mut blk = h.view_mut((k * nu, k * nu), (nu, nu));
            blk += &weights.r;
        }
        let h = h * 2.0;
        let factor = QpFactor::new(&h)?;
        Ok(Self { model, weights, horizon, powers, gamma, factor })
    }

    fn predicted_block(&self, p: usize) -> nalgebra::DMatrixView<'_, f64> {
        let nx = self.model.nx();
        self.gamma.rows(p * nx, nx)
    }

    /// Solves the tracking problem from `x0` with step-wise state rows for
    /// `p = 1..N−1`, input rows for every step, and `x_N ∈ terminal`.
    pub fn solve(
        &self,
        x0: &DVector<f64>,
        x_r: &DVector<f64>,
        stacked: &ProblemConstraints,
        terminal: &Polytope,
    ) -> Result<OpSolution, MpcError> {
        let (nx, nu, n) = (self.model.nx(), self.model.nu(), self.horizon);
        if x0.len() != nx || x_r.len() != nx || terminal.dim() != nx {
            return Err(MpcError::Dimension("state vectors or terminal set"));
        }
        if stacked.horizon() != n {
            return Err(MpcError::Dimension("constraint horizon"));
        }
        // Linear term 2Γᵀ Q̄ (Φx0 − X_r).
        let mut f = DVector::zeros(n * nu);
        for p in 1..=n {
            let w = if p == n { &self.weights.p } else { &self.weights.q };
            let e = &self.powers[p] * x0 - x_r;
            f += self.predicted_block(p).transpose() * (w * e);
        }
        let f = f * 2.0;

        let (a, b) = self.constraint_rows(x0, stacked, terminal)?;
        let Some((a, b)) = drop_constant_rows(a, b) else {
            return Ok(self.infeasible(x0, x_r));
        };
        let sol = self.factor.solve(&f, &a, &b)?;
        let scale = 1.0 + f.amax().max(self.factor.hessian().amax() * sol.x.amax());
        let scaled_kkt = sol.kkt_residual / scale;
        let status = match sol.status {
            QpStatus::Optimal if scaled_kkt <= KKT_TOL => OpStatus::Optimal,
            QpStatus::Optimal | QpStatus::MaxIter => OpStatus::MaxIter,
            QpStatus::Infeasible => OpStatus::Infeasible,
        };
        if status == OpStatus::Infeasible {
            return Ok(self.infeasible(x0, x_r));
        }
        let inputs: Vec<DVector<f64>> = (0..n).map(|k| sol.x.rows(k * nu, nu).into_owned()).collect();
        let states = rollout(&self.model, x0, &inputs);
        let cost = sequence_cost(&states, &inputs, x_r, &self.weights);
        Ok(OpSolution { inputs, states, cost, status, kkt_residual: scaled_kkt, iterations: sol.iterations })
    }

    /// Recovery variant of [`Controller::solve`] that always has a solution
    /// when the input set is nonempty. Input rows stay hard. The trailing
    /// `2·nx` state rows of each step (the box) share one slack priced at
    /// `1e3·penalty`; every other state row and the terminal rows share a
    /// second slack priced at `penalty`. Returns the solution and the larger
    /// slack, i.e. the worst row violation of the plan.
    pub fn solve_soft(
        &self,
        x0: &DVector<f64>,
        x_r: &DVector<f64>,
        stacked: &ProblemConstraints,
        terminal: &Polytope,
        penalty: f64,
    ) -> Result<(OpSolution, f64), MpcError> {
        let (nx, nu, n) = (self.model.nx(), self.model.nu(), self.horizon);
        if x0.len() != nx || x_r.len() != nx || terminal.dim() != nx || stacked.horizon() != n {
            return Err(MpcError::Dimension("recovery problem"));
        }
        let nv = n * nu;
        let (s_row, s_box) = (nv, nv + 1);
        let mut f = DVector::zeros(nv + 2);
        for p in 1..=n {
            let w = if p == n { &self.weights.p } else { &self.weights.q };
            let e = &self.powers[p] * x0 - x_r;
            let mut blk = f.rows_mut(0, nv);
            blk += self.predicted_block(p).transpose() * (w * e) * 2.0;
        }
        f[s_row] = penalty;
        f[s_box] = penalty * 1e2;
        let (a, b) = self.constraint_rows(x0, stacked, terminal)?;
        let m = a.nrows();
        let mut a2 = DMatrix::zeros(m + 2, nv + 2);
        a2.view_mut((0, 0), (m, nv)).copy_from(&a);
        // Rows follow `constraint_rows`: steps 1..N−1, terminal, inputs.
        let mut r = 0;
        for p in 1..n {
            let k = stacked.state[p].0.nrows();
            let boxed = (2 * nx).min(k);
            for i in 0..k {
                a2[(r + i, if i >= k - boxed { s_box } else { s_row })] = -1.0;
            }
            r += k;
        }
        for i in 0..terminal.n_facets() {
            a2[(r + i, s_row)] = -1.0;
        }
        a2[(m, s_row)] = -1.0;
        a2[(m + 1, s_box)] = -1.0;
        let mut b2 = DVector::zeros(m + 2);
        b2.rows_mut(0, m).copy_from(&b);
        let mut h = DMatrix::zeros(nv + 2, nv + 2);
        h.view_mut((0, 0), (nv, nv)).copy_from(self.factor.hessian());
        h[(s_row, s_row)] = 1.0;
        h[(s_box, s_box)] = 1.0;
        let sol = qp::solve(&h, &f, &a2, &b2)?;
        let scaled_kkt = sol.kkt_residual / (1.0 + f.amax().max(h.amax() * sol.x.amax()));
        let status = match sol.status {
            QpStatus::Optimal if scaled_kkt <= KKT_TOL => OpStatus::Optimal,
            QpStatus::Optimal | QpStatus::MaxIter => OpStatus::MaxIter,
            QpStatus::Infeasible => OpStatus::Infeasible,
        };
        let inputs: Vec<DVector<f64>> = (0..n).map(|k| sol.x.rows(k * nu, nu).into_owned()).collect();
        let states = rollout(&self.model, x0, &inputs);
        let cost = sequence_cost(&states, &inputs, x_r, &self.weights);
        let slack = sol.x[s_row].max(sol.x[s_box]).max(0.0);
        Ok((OpSolution { inputs, states, cost, status, kkt_residual: scaled_kkt, iterations: sol.iterations }, slack))
    }

    fn infeasible(&self, x0: &DVector<f64>, _x_r: &DVector<f64>) -> OpSolution {
        let inputs = vec![DVector::zeros(self.model.nu()); self.horizon];
        let states = rollout(&self.model, x0, &inputs);
        OpSolution { inputs, states, cost: f64::INFINITY, status: OpStatus::Infeasible, kkt_residual: f64::NAN, iterations: 0 }
    }

    fn constraint_rows(
        &self,
        x0: &DVector<f64>,
        stacked: &ProblemConstraints,
        terminal: &Polytope,
    ) -> Result<(DMatrix<f64>, DVector<f64>), MpcError> {
        let (nu, n) = (self.model.nu(), self.horizon);
        let mut blocks: Vec<(DMatrix<f64>, DVector<f64>)> = Vec::new();
        for p in 1..n {
            let (h, g) = &stacked.state[p];
            let a = h * self.predicted_block(p);
            let b = g - h * (&self.powers[p] * x0);
            blocks.push((a, b));
        }
        let ht = terminal.normals();
        blocks.push((ht * self.predicted_block(n), terminal.offsets() - ht * (&self.powers[n] * x0)));
        let (hu, gu) = &stacked.input;
        for k in 0..n {
            let mut a = DMatrix::zeros(hu.nrows(), n * nu);
            a.view_mut((0, k * nu), (hu.nrows(), nu)).copy_from(hu);
            blocks.push((a, gu.clone()));
        }
        let rows: usize = blocks.iter().map(|(a, _)| a.nrows()).sum();
        let mut a = DMatrix::zeros(rows, n * nu);
        let mut b = DVector::zeros(rows);
        let mut r = 0;
        for (ba, bb) in blocks {
            let k = ba.nrows();
            a.view_mut((r, 0), (k, n * nu)).copy_from(&ba);
            b.rows_mut(r, k).copy_from(&bb);
            r += k;
        }
        Ok((a, b))
    }

    /// Largest violation of this problem's constraints by a candidate input
    /// sequence started from `x0`.
    pub fn candidate_violation(
        &self,
        x0: &DVector<f64>,
        inputs: &[DVector<f64>],
        stacked: &ProblemConstraints,
        terminal: &Polytope,
    ) -> Result<f64, MpcError> {
        let (a, b) = self.constraint_rows(x0, stacked, terminal)?;
        let u = DVector::from_iterator(inputs.len() * self.model.nu(), inputs.iter().flat_map(|v| v.iter().copied()));
        Ok((a * u - b).max().max(0.0))
    }
}

fn drop_constant_rows(a: DMatrix<f64>, b: DVector<f64>) -> Option<(DMatrix<f64>, DVector<f64>)> {
    let mut keep = Vec::with_capacity(a.nrows());
    for i in 0..a.nrows() {
        if a.row(i).amax() <= 1e-12 {
            if b[i] < -TOL_GEOM {
                return None;
            }
        } else {
            keep.push(i);
        }
    }
    let a2 = DMatrix::from_fn(keep.len(), a.ncols(), |r, c| a[(keep[r], c)]);
    let b2 = DVector::from_fn(keep.len(), |r, _| b[keep[r]]);
    Some((a2, b2))
}

pub fn build_and_solve_op(
    x0: &DVector<f64>,
    x_r: &DVector<f64>,
    stacked: &ProblemConstraints,
    terminal: &Polytope,
    model: &DiscreteModel,
    weights: &Weights,
    horizon: usize,
) -> Result<OpSolution, MpcError> {
    Controller::new(model.clone(), weights.clone(), horizon)?.solve(x0, x_r, stacked, terminal)
}

/// Reference `(ξ_x, ξ_y, v_x, 0, 0, 0)`.
pub fn reference_point(xi_x: f64, xi_y: f64, v_x: f64) -> DVector<f64> {
    DVector::from_vec(vec![xi_x, xi_y, v_x, 0.0, 0.0, 0.0])
}

#[derive(Debug, Clone)]
pub struct Candidate {
    pub inputs: Vec<DVector<f64>>,
    pub states: Vec<DVector<f64>>,
}

/// Drops the first input, appends `mu` and extends the state sequence by
/// one step.
pub fn shift_feasible_solution(prev: &OpSolution, mu: &DVector<f64>, model: &DiscreteModel) -> Candidate {
    let mut inputs: Vec<DVector<f64>> = prev.inputs[1..].to_vec();
    inputs.push(mu.clone());
    let mut states: Vec<DVector<f64>> = prev.states[1..].to_vec();
    let last = states.last().expect("nonempty plan").clone();
    states.push(model.step_vec(&last, mu));
    Candidate { inputs, states }
}

/// Minimizer of the one-step decrease function at fixed `x_N`, replaced by
/// the least-effort admissible input when it leaves `U` or the terminal set.
pub fn terminal_control_law(
    x_n: &DVector<f64>,
    x_r: &DVector<f64>,
    model: &DiscreteModel,
    weights: &Weights,
    terminal: &Polytope,
    u_set: &Polytope,
) -> Result<DVector<f64>, MpcError> {
    let (a, b, p) = (&model.a, &model.b, &weights.p);
    let s = &weights.r + b.transpose() * p * b;
    let rhs = b.transpose() * p * (a * x_n - x_r);
    let mu = -s.lu().solve(&rhs).ok_or(MpcError::Dimension("singular R + BᵀPB"))?;
    let next = model.step_vec(x_n, &mu);
    if u_set.contains_point(&mu, 1e-9) && terminal.contains_point(&next, TOL_GEOM) {
        return Ok(mu);
    }
    let (mu, violation) = least_violation_input(x_n, model, &weights.r, terminal, u_set)?;
    if violation <= 1e-6 {
        Ok(mu)
    } else {
        Err(MpcError::InvariantViolation(format!(
            "terminal state {:?} has no admissible successor (best violation {violation:.3e})",
            x_n.as_slice()
        )))
    }
}

/// Input in `U` whose successor violates `terminal` the least, breaking
/// ties towards small `μᵀRμ`. Returns the input and the violation.
pub fn least_violation_input(
    x_n: &DVector<f64>,
    model: &DiscreteModel,
    r: &DMatrix<f64>,
    terminal: &Polytope,
    u_set: &Polytope,
) -> Result<(DVector<f64>, f64), MpcError> {
    let (a, b) = (&model.a, &model.b);
    let (mt, mu_rows) = (terminal.n_facets(), u_set.n_facets());
    let m = model.nu();
    // Variables (μ, s): H(Ax + Bμ) − s ≤ g, μ ∈ U, s ≥ 0.
    let mut ca = DMatrix::zeros(mt + mu_rows + 1, m + 1);
    let mut cb = DVector::zeros(mt + mu_rows + 1);
    ca.view_mut((0, 0), (mt, m)).copy_from(&(terminal.normals() * b));
    ca.view_mut((0, m), (mt, 1)).fill(-1.0);
    cb.rows_mut(0, mt).copy_from(&(terminal.offsets() - terminal.normals() * (a * x_n)));
    ca.view_mut((mt, 0), (mu_rows, m)).copy_from(u_set.normals());
    cb.rows_mut(mt, mu_rows).copy_from(u_set.offsets());
    ca[(mt + mu_rows, m)] = -1.0;
    let mut h = DMatrix::zeros(m + 1, m + 1);
    h.view_mut((0, 0), (m, m)).copy_from(&(r * 2.0));
    h[(m, m)] = 1e-6;
    let mut f = DVector::zeros(m + 1);
    f[m] = 1e6;
    let sol = qp::solve(&h, &f, &ca, &cb)?;
    if sol.status != QpStatus::Optimal {
        return Err(MpcError::InvariantViolation("no input satisfies the input bounds".into()));
    }
    let mu = sol.x.rows(0, m).into_owned();
    let next = model.step_vec(x_n, &mu);
    let violation = (terminal.normals() * next - terminal.offsets()).max().max(0.0);
    Ok((mu, violation))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Certificate {
    /// Direct evaluation of the one-step decrease function.
    pub l: f64,
    /// `−¼ fᵀM⁻¹f`, the minimum of `ζᵀMζ + fᵀζ`.
    pub l_min: f64,
    /// `‖(A − I)x_r‖²_P`, the constant the quadratic form leaves out.
    pub offset: f64,
}

/// `f = 2[AᵀP(A − I)x_r; BᵀP(A − I)x_r]`
pub fn certificate_linear_term(model: &DiscreteModel, p: &DMatrix<f64>, x_r: &DVector<f64>) -> DVector<f64> {
    let n = model.nx();
    let drift = (&model.a - DMatrix::<f64>::identity(n, n)) * x_r;
    let pd = p * drift;
    let top = model.a.transpose() * &pd;
    let bottom = model.b.transpose() * &pd;
    let mut f = DVector::zeros(n + model.nu());
    f.rows_mut(0, n).copy_from(&top);
    f.rows_mut(n, model.nu()).copy_from(&bottom);
    f * 2.0
}

pub fn decrease_certificate(
    x_n: &DVector<f64>,
    mu: &DVector<f64>,
    x_r: &DVector<f64>,
    model: &DiscreteModel,
    weights: &Weights,
) -> Certificate {
    let next = model.step_vec(x_n, mu);
    let e = x_n - x_r;
    let l = quad_form(&weights.p, &(next - x_r)) - quad_form(&weights.p, &e) + quad_form(&weights.q, &e) + quad_form(&weights.r, mu);
    let m = m_matrix(model, &weights.q, &weights.r, &weights.p);
    let f = certificate_linear_term(model, &weights.p, x_r);
    let l_min = match m.clone().cholesky() {
        Some(c) => -0.25 * f.dot(&c.solve(&f)),
        None => f64::NEG_INFINITY,
    };
    let n = model.nx();
    let drift = (&model.a - DMatrix::<f64>::identity(n, n)) * x_r;
    Certificate { l, l_min, offset: quad_form(&weights.p, &drift) }
}

/// `ζ* = −½M⁻¹f`, split into the state offset and the input.
pub fn certificate_minimizer(model: &DiscreteModel, weights: &Weights, x_r: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
    let m = m_matrix(model, &weights.q, &weights.r, &weights.p);
    let f = certificate_linear_term(model, &weights.p, x_r);
    let z = m.cholesky()?.solve(&f) * -0.5;
    let n = model.nx();
    Some((z.rows(0, n).into_owned(), z.rows(n, model.nu()).into_owned()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::stack;
    use crate::vehicle::{Bounds, VehicleParams};

    fn scalar(a: f64, b: f64) -> DiscreteModel {
        DiscreteModel { a: DMatrix::from_element(1, 1, a), b: DMatrix::from_element(1, 1, b), ts: 1.0 }
    }

    #[test]
    fn scalar_dare() {
        let p = solve_dare(&scalar(0.5, 1.0), &DMatrix::from_element(1, 1, 1.0), &DMatrix::from_element(1, 1, 1.0)).unwrap();
        assert!((p[(0, 0)] - (0.25 + 4.0625f64.sqrt()) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_dynamics_weight() {
        let model = DiscreteModel { a: DMatrix::zeros(2, 2), b: DMatrix::identity(2, 1), ts: 1.0 };
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]));
        let r = DMatrix::identity(1, 1);
        let eps = 1e-3;
        let p = terminal_weight(&model, &q, &r, eps).unwrap();
        assert!((&p - &q * (1.0 - eps)).amax() < 1e-12);
        assert!((riccati_lhs(&model, &q, &r, &p) - &q * eps).amax() < 1e-12);
    }

    #[test]
    fn weight_validation() {
        let model = scalar(0.5, 1.0);
        let one = DMatrix::from_element(1, 1, 1.0);
        assert_eq!(terminal_weight(&model, &DMatrix::zeros(1, 1), &one, 1e-6), Err(MpcError::ZeroStateWeight));
        assert_eq!(terminal_weight(&model, &one, &one, 1.5), Err(MpcError::BadDeflation(1.5)));
    }

    #[test]
    fn vehicle_terminal_weight_margin() {
        let model = DiscreteModel::from_params(&VehicleParams::default(), 0.2).unwrap();
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![1e-9, 1.0, 10.0, 10.0, 1.0, 1.0]));
        let r = DMatrix::from_diagonal(&DVector::from_vec(vec![5.0, 5.0]));
        let p = terminal_weight(&model, &q, &r, 1e-6).unwrap();
        let lhs = riccati_lhs(&model, &q, &r, &p);
        assert!(min_eigenvalue(&lhs) >= 0.5e-6 * 1e-9);
        assert!(m_matrix(&model, &q, &r, &p).cholesky().is_some());
    }

    fn double_integrator() -> DiscreteModel {
        DiscreteModel {
            a: DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]),
            b: DMatrix::from_row_slice(2, 1, &[0.5, 1.0]),
            ts: 1.0,
        }
    }

    #[test]
    fn unconstrained_matches_normal_equations() {
        let model = double_integrator();
        let w = Weights { q: DMatrix::identity(2, 2), r: DMatrix::identity(1, 1), p: DMatrix::identity(2, 2) };
        let ctl = Controller::new(model.clone(), w.clone(), 2).unwrap();
        let x0 = DVector::from_vec(vec![1.0, 0.0]);
        // Oracle: stack the residuals and solve the least-squares normal equations.
        // x1 = A x0 + B u0, x2 = A² x0 + AB u0 + B u1.
        let a = &model.a;
        let b = &model.b;
        let mut g = DMatrix::zeros(6, 2);
        g.view_mut((0, 0), (2, 1)).copy_from(b);
        g.view_mut((2, 0), (2, 1)).copy_from(&(a * b));
        g.view_mut((2, 1), (2, 1)).copy_from(b);
        g[(4, 0)] = 1.0;
        g[(5, 1)] = 1.0;
        let mut c = DVector::zeros(6);
        c.rows_mut(0, 2).copy_from(&(a * &x0));
        c.rows_mut(2, 2).copy_from(&(a * a * &x0));
        let u_star = (g.transpose() * &g).lu().solve(&(-(g.transpose() * c))).unwrap();
        let big = Polytope::from_bounds(&DVector::from_element(2, -1e6), &DVector::from_element(2, 1e6)).unwrap();
        let u_big = Polytope::from_bounds(&DVector::from_element(1, -1e6), &DVector::from_element(1, 1e6)).unwrap();
        let pc = ProblemConstraints::uniform(&big, &u_big, 2);
        let sol = ctl.solve(&x0, &DVector::zeros(2), &pc, &big).unwrap();
        assert_eq!(sol.status, OpStatus::Optimal);
        assert!((sol.inputs[0][0] - u_star[0]).abs() < 1e-10);
        assert!((sol.inputs[1][0] - u_star[1]).abs() < 1e-10);
        assert!((sol.cost - sequence_cost(&sol.states, &sol.inputs, &DVector::zeros(2), &w)).abs() < 1e-12);
    }

    #[test]
    fn equilibrium_has_zero_cost() {
        let model = DiscreteModel::from_params(&VehicleParams::default(), 0.2).unwrap();
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![1e-9, 1.0, 10.0, 10.0, 1.0, 1.0]));
        let r = DMatrix::from_diagonal(&DVector::from_vec(vec![5.0, 5.0]));
        let p = terminal_weight(&model, &q, &r, 1e-6).unwrap();
        let ctl = Controller::new(model, Weights { q, r, p }, 20).unwrap();
        let x = reference_point(700.0, 649.95, 0.0);
        let stacked = stack(&Bounds::default(), vec![Vec::new(); 21], 20, None).unwrap();
        let pc = ProblemConstraints::from_stacked(&stacked);
        let big = Polytope::from_bounds(&DVector::from_element(6, -1e4), &DVector::from_element(6, 1e4)).unwrap();
        let sol = ctl.solve(&x, &x, &pc, &big).unwrap();
        assert_eq!(sol.status, OpStatus::Optimal);
        assert!(sol.cost.abs() < 1e-12);
        assert!(sol.inputs.iter().all(|u| u.amax() < 1e-9));
    }

    #[test]
    fn infeasible_problem_is_reported() {
        let model = double_integrator();
        let w = Weights { q: DMatrix::identity(2, 2), r: DMatrix::identity(1, 1), p: DMatrix::identity(2, 2) };
        let ctl = Controller::new(model, w, 3).unwrap();
        let x_set = Polytope::from_bounds(&DVector::from_vec(vec![-5.0, -1.0]), &DVector::from_vec(vec![5.0, 1.0])).unwrap();
        let u_set = Polytope::from_bounds(&DVector::from_element(1, -0.5), &DVector::from_element(1, 0.5)).unwrap();
        let pc = ProblemConstraints::uniform(&x_set, &u_set, 3);
        // Moving right at the speed limit from the right edge cannot be stopped.
        let sol = ctl.solve(&DVector::from_vec(vec![4.9, 1.0]), &DVector::zeros(2), &pc, &x_set).unwrap();
        assert_eq!(sol.status, OpStatus::Infeasible);
    }

    #[test]
    fn recovery_minimizes_worst_violation() {
        let model = double_integrator();
        let w = Weights { q: DMatrix::identity(2, 2), r: DMatrix::identity(1, 1), p: DMatrix::identity(2, 2) };
        let ctl = Controller::new(model.clone(), w, 3).unwrap();
        let x_set = Polytope::from_bounds(&DVector::from_vec(vec![-5.0, -1.0]), &DVector::from_vec(vec![5.0, 1.0])).unwrap();
        let u_set = Polytope::from_bounds(&DVector::from_element(1, -0.5), &DVector::from_element(1, 0.5)).unwrap();
        let pc = ProblemConstraints::uniform(&x_set, &u_set, 3);
        let x0 = DVector::from_vec(vec![4.9, 1.0]);
        let (sol, slack) = ctl.solve_soft(&x0, &DVector::zeros(2), &pc, &x_set, 1e4).unwrap();
        assert_eq!(sol.status, OpStatus::Optimal);
        let worst = |states: &[DVector<f64>]| {
            states[1..].iter().map(|x| (x_set.normals() * x - x_set.offsets()).max().max(0.0)).fold(0.0, f64::max)
        };
        assert!((worst(&sol.states) - slack).abs() < 1e-6);
        assert!(sol.inputs.iter().all(|u| u[0].abs() <= 0.5 + 1e-9));
        // Grid oracle over the input box.
        let grid: Vec<f64> = (0..=40).map(|k| -0.5 + 0.025 * k as f64).collect();
        let mut best = f64::INFINITY;
        for &a in &grid {
            for &b in &grid {
                for &c in &grid {
                    let us = [a, b, c].map(|v| DVector::from_element(1, v));
                    best = best.min(worst(&rollout(&model, &x0, &us)));
                }
            }
        }
        assert!(slack > 0.0 && slack <= best + 1e-3, "slack {slack}, grid {best}");
    }

    #[test]
    fn recovery_agrees_with_feasible_solve() {
        let (model, w) = vehicle_weights();
        let ctl = Controller::new(model, w, 20).unwrap();
        let stacked = stack(&Bounds::default(), vec![Vec::new(); 21], 20, None).unwrap();
        let pc = ProblemConstraints::from_stacked(&stacked);
        let x0 = DVector::from_vec(vec![100.0, 649.95, 15.0, 0.0, 0.0, 0.0]);
        let x_r = reference_point(600.0, 649.95, 20.0);
        let terminal = stacked.state_set(20).unwrap();
        let hard = ctl.solve(&x0, &x_r, &pc, &terminal).unwrap();
        let (soft, slack) = ctl.solve_soft(&x0, &x_r, &pc, &terminal, 1e4).unwrap();
        assert_eq!(soft.status, OpStatus::Optimal);
        assert!(slack < 1e-6);
        assert!((soft.cost - hard.cost).abs() <= 1e-6 * (1.0 + hard.cost.abs()));
    }

    fn vehicle_weights() -> (DiscreteModel, Weights) {
        let model = DiscreteModel::from_params(&VehicleParams::default(), 0.2).unwrap();
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![1e-9, 1.0, 10.0, 10.0, 1.0, 1.0]));
        let r = DMatrix::from_diagonal(&DVector::from_vec(vec![5.0, 5.0]));
        let p = terminal_weight(&model, &q, &r, 1e-6).unwrap();
        (model, Weights { q, r, p })
    }

    #[test]
    fn certificate_quadratic_identity() {
        let (model, w) = vehicle_weights();
        let m = m_matrix(&model, &w.q, &w.r, &w.p);
        for x_r in [reference_point(600.0, 649.95, 0.0), reference_point(600.0, 649.95, 20.0)] {
            let f = certificate_linear_term(&model, &w.p, &x_r);
            for k in 0..5 {
                let z = DVector::from_fn(8, |i, _| ((i * 7 + k * 3) % 5) as f64 - 2.0);
                let x_n = &x_r + z.rows(0, 6);
                let mu = z.rows(6, 2).into_owned();
                let c = decrease_certificate(&x_n, &mu, &x_r, &model, &w);
                let quad = quad_form(&m, &z) + f.dot(&z) + c.offset;
                assert!((c.l - quad).abs() < 1e-9 * (1.0 + c.l.abs()));
            }
        }
    }

    #[test]
    fn certificate_at_minimizer() {
        // Non-vehicle system so that M is well conditioned.
        let model = double_integrator();
        let q = DMatrix::identity(2, 2);
        let r = DMatrix::identity(1, 1);
        let p = terminal_weight(&model, &q, &r, 0.1).unwrap();
        let w = Weights { q, r, p };
        let x_r = DVector::from_vec(vec![3.0, 1.0]);
        let (dz, mu) = certificate_minimizer(&model, &w, &x_r).unwrap();
        let c = decrease_certificate(&(&x_r + &dz), &mu, &x_r, &model, &w);
        assert!(c.l_min < 0.0);
        assert!((c.l - (c.l_min + c.offset)).abs() < 1e-9);
        // At a stationary reference the constant vanishes and L equals L_min.
        let x_r = DVector::from_vec(vec![3.0, 0.0]);
        let (dz, mu) = certificate_minimizer(&model, &w, &x_r).unwrap();
        let c = decrease_certificate(&(&x_r + &dz), &mu, &x_r, &model, &w);
        assert_eq!(c.offset, 0.0);
        assert!((c.l - c.l_min).abs() < 1e-9);
        let zero = decrease_certificate(&DVector::zeros(2), &DVector::zeros(1), &DVector::zeros(2), &model, &w);
        assert_eq!((zero.l, zero.l_min), (0.0, 0.0));
    }

    #[test]
    fn scalar_terminal_law_by_hand() {
        // a=0.5, b=1, p=q=r=1: μ = −p·b·(a·x − x_r)/(r + b²p) = −(0.5·2 − 0)/2.
        let model = scalar(0.5, 1.0);
        let one = DMatrix::from_element(1, 1, 1.0);
        let w = Weights { q: one.clone(), r: one.clone(), p: one };
        let box1 = |lo: f64, hi: f64| Polytope::from_bounds(&DVector::from_element(1, lo), &DVector::from_element(1, hi)).unwrap();
        let mu = terminal_control_law(&DVector::from_element(1, 2.0), &DVector::zeros(1), &model, &w, &box1(-10.0, 10.0), &box1(-5.0, 5.0)).unwrap();
        assert!((mu[0] + 0.5).abs() < 1e-12);
        // Narrow input box forces the feasibility fallback.
        let mu = terminal_control_law(&DVector::from_element(1, 2.0), &DVector::zeros(1), &model, &w, &box1(-10.0, 10.0), &box1(-0.2, 0.2)).unwrap();
        assert!((mu[0]).abs() < 1e-9);
        let err = terminal_control_law(&DVector::from_element(1, 2.0), &DVector::zeros(1), &model, &w, &box1(-0.1, 0.1), &box1(-0.2, 0.2));
        assert!(matches!(err, Err(MpcError::InvariantViolation(_))));
    }

    #[test]
    fn shift_preserves_length() {
        let model = double_integrator();
        let w = Weights { q: DMatrix::identity(2, 2), r: DMatrix::identity(1, 1), p: DMatrix::identity(2, 2) };
        let x0 = DVector::from_vec(vec![1.0, 0.0]);
        let inputs = vec![DVector::from_element(1, -0.3), DVector::from_element(1, 0.1)];
        let states = rollout(&model, &x0, &inputs);
        let cost = sequence_cost(&states, &inputs, &DVector::zeros(2), &w);
        let prev = OpSolution { inputs, states, cost, status: OpStatus::Optimal, kkt_residual: 0.0, iterations: 1 };
        let c = shift_feasible_solution(&prev, &DVector::from_element(1, 0.2), &model);
        assert_eq!(c.inputs.len(), 2);
        assert_eq!(c.states.len(), 3);
        assert_eq!(c.states[0], prev.states[1]);
        assert_eq!(c.inputs[1][0], 0.2);
        assert_eq!(c.states[2], model.step_vec(&prev.states[2], &c.inputs[1]));
    }

    #[test]
    fn terminal_law_zero_case() {
        let model = DiscreteModel::from_params(&VehicleParams::default(), 0.2).unwrap();
        let q = DMatrix::identity(6, 6);
        let r = DMatrix::identity(2, 2);
        let p = terminal_weight(&model, &q, &r, 1e-6).unwrap();
        let w = Weights { q, r, p };
        let big = Polytope::from_bounds(&DVector::from_element(6, -1e3), &DVector::from_element(6, 1e3)).unwrap();
        let u = Bounds::default().input_set().unwrap();
        let mu = terminal_control_law(&DVector::zeros(6), &DVector::zeros(6), &model, &w, &big, &u).unwrap();
        assert_eq!(mu.amax(), 0.0);
    }
}
