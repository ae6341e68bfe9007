//! Dual-mode model predictive control for connected autonomous vehicles
//! approaching a signalized junction.

pub mod linalg;
pub mod lp;
pub mod geometry;
pub mod vehicle;
pub mod signal;
pub mod constraints;
pub mod invariant;
pub mod qp;
pub mod mpc;
pub mod sim;
