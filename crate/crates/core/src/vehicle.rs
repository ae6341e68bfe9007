//! Dynamic bicycle model, its LTI linearization and ZOH discretization.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, Polytope};
use crate::linalg::expm;

pub const NX: usize = 6;
pub const NU: usize = 2;

/// Longitudinal speed below which the tire model is singular.
pub const VX_FLOOR: f64 = 0.1;
const RK4_SUBSTEPS: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VehicleError {
    #[error("linearization speed v_x0 must be positive, got {0}")]
    NonPositiveSpeed(f64),
    #[error("parameter {0} must be strictly positive")]
    InvalidParameter(&'static str),
    #[error("sampling time must be positive, got {0}")]
    BadSamplingTime(f64),
    #[error("non-finite entries in system matrices")]
    NonFinite,
    #[error("longitudinal speed {0} fell below the model floor")]
    BelowSpeedFloor(f64),
    #[error("bound interval {0} has lower > upper")]
    InvertedBound(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleParams {
    pub mass: f64,
    pub yaw_inertia: f64,
    pub lf: f64,
    pub lr: f64,
    pub cf: f64,
    pub cr: f64,
    pub vx0: f64,
    #[serde(default)]
    pub vy0: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self { mass: 2050.0, yaw_inertia: 3344.0, lf: 1.1, lr: 1.58, cf: 65000.0, cr: 85000.0, vx0: 15.0, vy0: 0.0 }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<(), VehicleError> {
        let named = [
            ("mass", self.mass),
            ("yaw_inertia", self.yaw_inertia),
            ("lf", self.lf),
            ("lr", self.lr),
            ("cf", self.cf),
            ("cr", self.cr),
        ];
        for (name, v) in named {
            if !(v.is_finite() && v > 0.0) {
                return Err(VehicleError::InvalidParameter(name));
            }
        }
        if !(self.vx0.is_finite() && self.vx0 > 0.0) {
            return Err(VehicleError::NonPositiveSpeed(self.vx0));
        }
        if !self.vy0.is_finite() {
            return Err(VehicleError::NonFinite);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState {
    pub xi_x: f64,
    pub xi_y: f64,
    pub v_x: f64,
    pub v_y: f64,
    pub psi: f64,
    pub omega: f64,
}

impl VehicleState {
    pub fn new(xi_x: f64, xi_y: f64, v_x: f64, v_y: f64, psi: f64, omega: f64) -> Self {
        Self { xi_x, xi_y, v_x, v_y, psi, omega }
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_vec(vec![self.xi_x, self.xi_y, self.v_x, self.v_y, self.psi, self.omega])
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2], v[3], v[4], v[5])
    }

    pub fn as_array(&self) -> [f64; NX] {
        [self.xi_x, self.xi_y, self.v_x, self.v_y, self.psi, self.omega]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub a: f64,
    pub delta: f64,
}

impl ControlInput {
    pub fn new(a: f64, delta: f64) -> Self {
        Self { a, delta }
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_vec(vec![self.a, self.delta])
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1])
    }
}

/// Interval bounds on the six states and two inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub state_lower: [f64; NX],
    pub state_upper: [f64; NX],
    pub input_lower: [f64; NU],
    pub input_upper: [f64; NU],
}

impl Default for Bounds {
    fn default() -> Self {
        let psi = 10f64.to_radians();
        Self {
            state_lower: [0.0, 600.0, 0.0, -5.0, -psi, -1.0],
            state_upper: [1600.0, 700.0, 30.0, 5.0, psi, 1.0],
            input_lower: [-8.0, -0.75],
            input_upper: [6.0, 0.75],
        }
    }
}

impl Bounds {
    pub fn validate(&self) -> Result<(), VehicleError> {
        let all = self.state_lower.iter().zip(&self.state_upper).chain(self.input_lower.iter().zip(&self.input_upper));
        for (i, (lo, hi)) in all.enumerate() {
            if !(lo.is_finite() && hi.is_finite()) {
                return Err(VehicleError::NonFinite);
            }
            if lo > hi {
                return Err(VehicleError::InvertedBound(i));
            }
        }
        Ok(())
    }

    pub fn state_set(&self) -> Result<Polytope, GeometryError> {
        Polytope::from_bounds(&DVector::from_row_slice(&self.state_lower), &DVector::from_row_slice(&self.state_upper))
    }

    pub fn input_set(&self) -> Result<Polytope, GeometryError> {
        Polytope::from_bounds(&DVector::from_row_slice(&self.input_lower), &DVector::from_row_slice(&self.input_upper))
    }

    /// Largest violation of any state bound (zero when inside).
    pub fn state_violation(&self, x: &VehicleState) -> f64 {
        let v = x.as_array();
        (0..NX)
            .map(|i| (self.state_lower[i] - v[i]).max(v[i] - self.state_upper[i]).max(0.0))
            .fold(0.0, f64::max)
    }

    pub fn input_violation(&self, u: &ControlInput) -> f64 {
        let v = [u.a, u.delta];
        (0..NU)
            .map(|i| (self.input_lower[i] - v[i]).max(v[i] - self.input_upper[i]).max(0.0))
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub ts: f64,
}

/// Continuous-time (A, B) with the velocities frozen at `(vx0, vy0)`.
pub fn continuous_matrices(p: &VehicleParams) -> Result<(DMatrix<f64>, DMatrix<f64>), VehicleError> {
    if p.vx0 == 0.0 {
        return Err(VehicleError::NonPositiveSpeed(p.vx0));
    }
    p.validate()?;
    let (vx, vy) = (p.vx0, p.vy0);
    let mut a = DMatrix::zeros(NX, NX);
    a[(0, 2)] = 1.0;
    a[(0, 4)] = -vy;
    a[(1, 3)] = 1.0;
    a[(1, 4)] = vx;
    a[(2, 5)] = vy;
    a[(3, 3)] = -2.0 * (p.cf + p.cr) / (p.mass * vx);
    a[(3, 5)] = 2.0 * (p.cr * p.lr - p.cf * p.lf) / (p.mass * vx) - vx;
    a[(4, 5)] = 1.0;
    a[(5, 3)] = 2.0 * (p.cr * p.lr - p.cf * p.lf) / (p.yaw_inertia * vx);
    a[(5, 5)] = -2.0 * (p.cr * p.lr * p.lr + p.cf * p.lf * p.lf) / (p.yaw_inertia * vx);
    let mut b = DMatrix::zeros(NX, NU);
    b[(2, 0)] = 1.0;
    b[(3, 1)] = 2.0 * p.cf / p.mass;
    b[(5, 1)] = 2.0 * p.cf * p.lf / p.yaw_inertia;
    Ok((a, b))
}

/// Zero-order-hold discretization through the exponential of the
/// augmented matrix `[[A, B], [0, 0]]·t_s`.
pub fn discretize_zoh(a: &DMatrix<f64>, b: &DMatrix<f64>, ts: f64) -> Result<DiscreteModel, VehicleError> {
    if !(ts.is_finite() && ts > 0.0) {
        return Err(VehicleError::BadSamplingTime(ts));
    }
    let (n, m) = (a.nrows(), b.ncols());
    let mut aug = DMatrix::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(a);
    aug.view_mut((0, n), (n, m)).copy_from(b);
    let e = expm(&(aug * ts)).ok_or(VehicleError::NonFinite)?;
    let ad = e.view((0, 0), (n, n)).into_owned();
    let bd = e.view((0, n), (n, m)).into_owned();
    if ad.iter().chain(bd.iter()).any(|v| !v.is_finite()) {
        return Err(VehicleError::NonFinite);
    }
    Ok(DiscreteModel { a: ad, b: bd, ts })
}

impl DiscreteModel {
    pub fn from_params(p: &VehicleParams, ts: f64) -> Result<Self, VehicleError> {
        let (a, b) = continuous_matrices(p)?;
        discretize_zoh(&a, &b, ts)
    }

    pub fn nx(&self) -> usize {
        self.a.nrows()
    }

    pub fn nu(&self) -> usize {
        self.b.ncols()
    }

    pub fn step_vec(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }
}

/// `x⁺ = A_d x + B_d u`
pub fn step(model: &DiscreteModel, x: &VehicleState, u: &ControlInput) -> VehicleState {
    let next = model.step_vec(&x.to_vector(), &u.to_vector());
    VehicleState::from_slice(next.as_slice())
}

fn nonlinear_rhs(p: &VehicleParams, s: &[f64; NX], u: &ControlInput) -> Result<[f64; NX], VehicleError> {
    let [_, _, vx, vy, psi, omega] = *s;
    if vx < VX_FLOOR {
        return Err(VehicleError::BelowSpeedFloor(vx));
    }
    let fyf = 2.0 * p.cf * (u.delta - (vy + p.lf * omega) / vx);
    let fyr = -2.0 * p.cr * (vy - p.lr * omega) / vx;
    Ok([
        psi.cos() * vx - psi.sin() * vy,
        psi.sin() * vx + psi.cos() * vy,
        vy * omega + u.a,
        -vx * omega + (fyf + fyr) / p.mass,
        omega,
        (p.lf * fyf - p.lr * fyr) / p.yaw_inertia,
    ])
}

/// Fixed-step RK4 integration of the nonlinear model over one sample.
pub fn nonlinear_step(p: &VehicleParams, x: &VehicleState, u: &ControlInput, ts: f64) -> Result<VehicleState, VehicleError> {
    if !(ts.is_finite() && ts > 0.0) {
        return Err(VehicleError::BadSamplingTime(ts));
    }
    let h = ts / RK4_SUBSTEPS as f64;
    let mut s = x.as_array();
    let axpy = |s: &[f64; NX], k: &[f64; NX], c: f64| -> [f64; NX] {
        let mut out = *s;
        for i in 0..NX {
            out[i] += c * k[i];
        }
        out
    };
    for _ in 0..RK4_SUBSTEPS {
        let k1 = nonlinear_rhs(p, &s, u)?;
        let k2 = nonlinear_rhs(p, &axpy(&s, &k1, h / 2.0), u)?;
        let k3 = nonlinear_rhs(p, &axpy(&s, &k2, h / 2.0), u)?;
        let k4 = nonlinear_rhs(p, &axpy(&s, &k3, h), u)?;
        for i in 0..NX {
            s[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    Ok(VehicleState::from_slice(&s))
}
