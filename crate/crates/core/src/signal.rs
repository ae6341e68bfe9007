//! Signal timing and reference-velocity scheduling at the stop line.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Division guard for a green window that is already open.
pub const GREEN_ONSET_FLOOR: f64 = 0.01;
/// Below this remaining distance the vehicle is treated as being at the line.
pub const AT_LINE: f64 = 1e-6;
const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SignalError {
    #[error("invalid signal timing: {0}")]
    InvalidTiming(&'static str),
    #[error("velocity window precondition violated: {0}")]
    WindowPrecondition(&'static str),
    #[error("no usable green window or red interval within the planning horizon")]
    MalformedHorizon,
    #[error("vehicle id and critical density must be at least 1")]
    BadCount,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Green,
    Red,
}

impl Phase {
    pub fn other(self) -> Phase {
        match self {
            Phase::Green => Phase::Red,
            Phase::Red => Phase::Green,
        }
    }
}

/// Broadcast from the junction, relative to the instant it is received.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalInfo {
    pub tau0: f64,
    pub tau_g: f64,
    pub tau_r: f64,
    pub next_phase: Phase,
    pub horizon: f64,
}

impl SignalInfo {
    pub fn validate(&self) -> Result<(), SignalError> {
        if !(self.tau0.is_finite() && self.tau0 >= 0.0) {
            return Err(SignalError::InvalidTiming("tau0 must be finite and nonnegative"));
        }
        if !(self.tau_g > 0.0 && self.tau_r > 0.0 && self.tau_g.is_finite() && self.tau_r.is_finite()) {
            return Err(SignalError::InvalidTiming("phase durations must be positive"));
        }
        if !(self.horizon + TIME_EPS >= self.tau0 + self.tau_g + self.tau_r) {
            return Err(SignalError::InvalidTiming("horizon shorter than one full cycle after tau0"));
        }
        Ok(())
    }

    fn duration(&self, p: Phase) -> f64 {
        match p {
            Phase::Green => self.tau_g,
            Phase::Red => self.tau_r,
        }
    }
}

/// Absolute signal timeline used by the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalPlan {
    pub initial_phase: Phase,
    pub first_switch: f64,
    pub green: f64,
    pub red: f64,
}

impl SignalPlan {
    fn duration(&self, p: Phase) -> f64 {
        match p {
            Phase::Green => self.green,
            Phase::Red => self.red,
        }
    }

    /// Phase active at time `t` and the time of the next switch.
    pub fn phase_at(&self, t: f64) -> (Phase, f64) {
        if t < self.first_switch {
            return (self.initial_phase, self.first_switch);
        }
        let cycle = self.green + self.red;
        let k = ((t - self.first_switch) / cycle).floor();
        let start = self.first_switch + k * cycle;
        let first = self.initial_phase.other();
        let first_end = start + self.duration(first);
        if t < first_end {
            (first, first_end)
        } else {
            (first.other(), start + cycle)
        }
    }

    pub fn info_at(&self, t: f64, horizon: f64) -> SignalInfo {
        let (phase, next) = self.phase_at(t);
        SignalInfo { tau0: next - t, tau_g: self.green, tau_r: self.red, next_phase: phase.other(), horizon }
    }

    /// Maximal constant-phase intervals overlapping `[t0, t1]`.
    pub fn intervals(&self, t0: f64, t1: f64) -> Vec<(f64, f64, Phase)> {
        let mut out = Vec::new();
        let mut t = t0;
        while t < t1 {
            let (p, end) = self.phase_at(t);
            out.push((t, end.min(t1), p));
            t = end;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSequence {
    pub onsets: Vec<(f64, Phase)>,
}

impl PhaseSequence {
    pub fn times(&self) -> Vec<f64> {
        self.onsets.iter().map(|o| o.0).collect()
    }

    fn end_of(&self, idx: usize, info: &SignalInfo) -> f64 {
        match self.onsets.get(idx + 1) {
            Some((t, _)) => *t,
            None => self.onsets[idx].0 + info.duration(self.onsets[idx].1),
        }
    }

    /// Green windows as (green onset, following red onset).
    pub fn green_windows(&self, info: &SignalInfo) -> Vec<(f64, f64)> {
        (0..self.onsets.len())
            .filter(|&i| self.onsets[i].1 == Phase::Green)
            .map(|i| (self.onsets[i].0, self.end_of(i, info)))
            .collect()
    }

    /// Red intervals as (red onset, following green onset).
    pub fn red_intervals(&self, info: &SignalInfo) -> Vec<(f64, f64)> {
        (0..self.onsets.len())
            .filter(|&i| self.onsets[i].1 == Phase::Red)
            .map(|i| (self.onsets[i].0, self.end_of(i, info)))
            .collect()
    }
}

pub fn build_phase_sequence(info: &SignalInfo) -> PhaseSequence {
    let mut onsets = Vec::new();
    if info.tau0 > 0.0 {
        onsets.push((0.0, info.next_phase.other()));
    }
    let mut t = info.tau0;
    let mut phase = info.next_phase;
    while t <= info.horizon + TIME_EPS {
        onsets.push((t, phase));
        t += info.duration(phase);
        phase = phase.other();
    }
    PhaseSequence { onsets }
}

/// Speeds `v` whose arrival time `d_m / v` lies in the window shrunk by
/// `tau_d` on both sides, intersected with `v_bounds`.
pub fn feasible_velocity_window(
    d_m: f64,
    green_onset: f64,
    red_onset: f64,
    tau_d: f64,
    v_bounds: (f64, f64),
) -> Result<Option<(f64, f64)>, SignalError> {
    if !(d_m.is_finite() && d_m >= 0.0) {
        return Err(SignalError::WindowPrecondition("distance must be nonnegative"));
    }
    if !(red_onset > green_onset) {
        return Err(SignalError::WindowPrecondition("red onset must follow green onset"));
    }
    if !(tau_d >= 0.0) {
        return Err(SignalError::WindowPrecondition("safety margin must be nonnegative"));
    }
    if !(red_onset - green_onset > 2.0 * tau_d) {
        return Err(SignalError::WindowPrecondition("window shorter than twice the margin"));
    }
    if d_m <= AT_LINE {
        return Ok(Some(v_bounds));
    }
    let g = green_onset.max(GREEN_ONSET_FLOOR);
    let lo = (d_m / (red_onset - tau_d)).max(v_bounds.0);
    let hi = (d_m / (g + tau_d)).min(v_bounds.1);
    Ok((lo <= hi).then_some((lo, hi)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectiveMode {
    Pass,
    StopNextRed,
    StopFollowingRed,
}

impl DirectiveMode {
    pub fn is_stop(self) -> bool {
        !matches!(self, DirectiveMode::Pass)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VelocityDirective {
    pub v_ref: f64,
    pub mode: DirectiveMode,
    /// Targeted arrival time at the stop line (stop modes only).
    pub t_reach: Option<f64>,
    /// Targeted red interval (stop modes only), relative to the broadcast.
    pub red_interval: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchedulingParams {
    pub v_bounds: (f64, f64),
    pub tau_d: f64,
    pub rho_crit: u32,
    pub scan_all_windows: bool,
}

pub fn reference_velocity(
    d_m: f64,
    vehicle_id: u32,
    params: &SchedulingParams,
    info: &SignalInfo,
) -> Result<VelocityDirective, SignalError> {
    if vehicle_id == 0 || params.rho_crit == 0 {
        return Err(SignalError::BadCount);
    }
    if !(d_m.is_finite() && d_m >= 0.0) {
        return Err(SignalError::WindowPrecondition("distance must be nonnegative"));
    }
    let seq = build_phase_sequence(info);
    let windows = seq.green_windows(info);
    let reds = seq.red_intervals(info);
    let mut first_infeasible: Option<f64> = None;
    for &(g, r) in &windows {
        let window = if r - g > 2.0 * params.tau_d && r - params.tau_d > g.max(GREEN_ONSET_FLOOR) + params.tau_d {
            feasible_velocity_window(d_m, g, r, params.tau_d, params.v_bounds)?
        } else {
            None
        };
        match window {
            Some((_, hi)) => {
                return Ok(VelocityDirective { v_ref: hi, mode: DirectiveMode::Pass, t_reach: None, red_interval: None })
            }
            None => {
                if first_infeasible.is_none() {
                    first_infeasible = Some(r);
                }
                if !params.scan_all_windows {
                    break;
                }
            }
        }
    }
    let red_onset = first_infeasible.ok_or(SignalError::MalformedHorizon)?;
    let j = reds
        .iter()
        .position(|&(r, _)| (r - red_onset).abs() <= TIME_EPS)
        .ok_or(SignalError::MalformedHorizon)?;
    let (mode, idx) = if vehicle_id <= params.rho_crit {
        (DirectiveMode::StopNextRed, j)
    } else {
        (DirectiveMode::StopFollowingRed, j + 1)
    };
    let &(r, g_next) = reds.get(idx).ok_or(SignalError::MalformedHorizon)?;
    let t_reach = 0.5 * (r + g_next);
    let v_ref = (d_m / t_reach).clamp(params.v_bounds.0, params.v_bounds.1);
    Ok(VelocityDirective { v_ref, mode, t_reach: Some(t_reach), red_interval: Some((r, g_next)) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn worked_example() -> SignalInfo {
        SignalInfo { tau0: 10.0, tau_g: 10.0, tau_r: 30.0, next_phase: Phase::Red, horizon: 90.0 }
    }

    fn params(scan: bool, rho: u32) -> SchedulingParams {
        SchedulingParams { v_bounds: (0.0, 30.0), tau_d: 2.0, rho_crit: rho, scan_all_windows: scan }
    }

    #[test]
    fn worked_example_onsets() {
        let s = build_phase_sequence(&worked_example());
        assert_eq!(s.times(), vec![0.0, 10.0, 40.0, 50.0, 80.0, 90.0]);
        assert_eq!(s.onsets[0].1, Phase::Green);
        assert_eq!(s.green_windows(&worked_example()), vec![(0.0, 10.0), (40.0, 50.0), (80.0, 90.0)]);
    }

    #[test]
    fn green_next_alternation() {
        let info = SignalInfo { tau0: 5.0, tau_g: 10.0, tau_r: 20.0, next_phase: Phase::Green, horizon: 40.0 };
        let s = build_phase_sequence(&info);
        assert_eq!(s.times(), vec![0.0, 5.0, 15.0, 35.0]);
        let phases: Vec<_> = s.onsets.iter().map(|o| o.1).collect();
        assert_eq!(phases, vec![Phase::Red, Phase::Green, Phase::Red, Phase::Green]);
    }

    #[test]
    fn zero_tau0_drops_leading_entry() {
        let info = SignalInfo { tau0: 0.0, tau_g: 10.0, tau_r: 30.0, next_phase: Phase::Red, horizon: 90.0 };
        let s = build_phase_sequence(&info);
        assert_eq!(s.onsets[0], (0.0, Phase::Red));
        assert_eq!(s.times(), vec![0.0, 30.0, 40.0, 70.0, 80.0]);
    }

    #[test]
    fn velocity_windows() {
        let (lo, hi) = feasible_velocity_window(500.0, 40.0, 50.0, 2.0, (0.0, 30.0)).unwrap().unwrap();
        assert!((lo - 10.4167).abs() < 1e-4);
        assert!((hi - 11.9048).abs() < 1e-4);
        assert_eq!(feasible_velocity_window(500.0, 0.0, 10.0, 2.0, (0.0, 30.0)).unwrap(), None);
        assert_eq!(feasible_velocity_window(0.0, 0.0, 10.0, 2.0, (0.0, 30.0)).unwrap(), Some((0.0, 30.0)));
        assert!(feasible_velocity_window(500.0, 40.0, 43.0, 2.0, (0.0, 30.0)).is_err());
    }

    #[test]
    fn reference_velocity_cases() {
        let info = worked_example();
        let d = reference_velocity(500.0, 3, &params(false, 15), &info).unwrap();
        assert_eq!(d.mode, DirectiveMode::StopNextRed);
        assert_eq!(d.t_reach, Some(25.0));
        assert!((d.v_ref - 20.0).abs() < 1e-12);

        let d = reference_velocity(500.0, 3, &params(true, 15), &info).unwrap();
        assert_eq!(d.mode, DirectiveMode::Pass);
        assert!((d.v_ref - 500.0 / 42.0).abs() < 1e-9);

        let d = reference_velocity(500.0, 16, &params(false, 15), &info).unwrap();
        assert_eq!(d.mode, DirectiveMode::StopFollowingRed);
        assert_eq!(d.t_reach, Some(65.0));
        assert!((d.v_ref - 500.0 / 65.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_zero_counts() {
        assert_eq!(reference_velocity(500.0, 0, &params(false, 15), &worked_example()), Err(SignalError::BadCount));
    }

    #[test]
    fn plan_phase_lookup() {
        let plan = SignalPlan { initial_phase: Phase::Green, first_switch: 20.0, green: 10.0, red: 30.0 };
        assert_eq!(plan.phase_at(0.0), (Phase::Green, 20.0));
        assert_eq!(plan.phase_at(20.0), (Phase::Red, 50.0));
        assert_eq!(plan.phase_at(55.0), (Phase::Green, 60.0));
        assert_eq!(plan.phase_at(61.0), (Phase::Red, 90.0));
        let info = plan.info_at(5.0, 90.0);
        assert_eq!(info.tau0, 15.0);
        assert_eq!(info.next_phase, Phase::Red);
        let iv = plan.intervals(0.0, 70.0);
        assert_eq!(iv.len(), 4);
        assert_eq!(iv[3], (60.0, 70.0, Phase::Red));
    }
}
