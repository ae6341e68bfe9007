//! Junction coordinator: admission, neighbour discovery, the cooperative
//! lane change and the round-synchronous closed loop.
//!
//! Each round every vehicle reads the plans its neighbours published in the
//! previous round, so the per-vehicle solves are independent and run in
//! parallel. A vehicle never plans to be behind the longitudinal positions it
//! published last round; followers use those positions as their constraint
//! right-hand sides, which keeps the one-round delay from eroding gaps.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraints::{active_halfplane, avoidance_row, stack, ActiveNormal, AvoidanceRow, ConstraintError, StopLimit};
use crate::geometry::{GeometryError, Polytope};
use crate::invariant::{maximal_control_invariant_decomposed, InvariantError, DEFAULT_MAX_ITER};
use crate::mpc::{
    least_violation_input, rollout, sequence_cost, shift_feasible_solution, terminal_control_law, terminal_weight, Candidate,
    Controller, MpcError, OpSolution, OpStatus, ProblemConstraints, Weights,
};
use crate::signal::{reference_velocity, DirectiveMode, Phase, SchedulingParams, SignalError, SignalPlan, VelocityDirective};
use crate::vehicle::{Bounds, DiscreteModel, VehicleError, VehicleParams, NX};

/// Slack on the no-fall-behind rows.
const PROMISE_SLACK: f64 = 1e-8;
/// Speed reduction used by a lane changer that sits too close behind its target leader.
const REPOSITION_SPEED_DROP: f64 = 3.0;
const TIME_EPS: f64 = 1e-9;
/// Price per metre of row violation in the recovery solve.
const RECOVERY_PENALTY: f64 = 1e4;
const CANDIDATE_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error("entry schedule exhausted")]
    ScheduleExhausted,
    #[error(transparent)]
    Vehicle(#[from] VehicleError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Mpc(#[from] MpcError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Invariant(#[from] InvariantError),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoadConfig {
    /// Lane centerlines; lanes are numbered from 1 in this order.
    pub lanes: Vec<f64>,
    pub stop_line: f64,
    /// Longitudinal reference for vehicles cleared to pass.
    pub zone_extent: f64,
    /// Vehicles are removed once they reach this position.
    pub exit_position: f64,
    pub entry_speed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalConfig {
    pub initial_phase: Phase,
    pub first_switch: f64,
    pub green: f64,
    pub red: f64,
    /// Planning horizon Γ handed to the scheduler.
    pub horizon: f64,
}

impl SignalConfig {
    pub fn plan(&self) -> SignalPlan {
        SignalPlan { initial_phase: self.initial_phase, first_switch: self.first_switch, green: self.green, red: self.red }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulingConfig {
    pub tau_d: f64,
    pub rho_crit: u32,
    #[serde(default)]
    pub scan_all_windows: bool,
    /// Speed tracked after crossing the stop line; `None` keeps the directive speed.
    #[serde(default)]
    pub cruise_speed: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SafetyConfig {
    pub gamma: f64,
    pub gamma_queue: f64,
    pub d_eps: f64,
    pub sensor_range: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcConfig {
    pub horizon: usize,
    pub ts: f64,
    pub q: [f64; 6],
    pub r: [f64; 2],
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_eps() -> f64 {
    crate::mpc::DEFAULT_DEFLATION
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    pub bounds: f64,
    pub gap: f64,
    pub stop_line: f64,
    /// Lateral tolerance ε_tol for lane-change completion.
    pub lane: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { bounds: 1e-6, gap: 1e-6, stop_line: 1e-3, lane: 0.2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    pub time: f64,
    pub lane: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaneChangeIntent {
    pub vehicle: u32,
    pub time: f64,
    pub target_lane: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CheckMode {
    #[default]
    Strict,
    Log,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub duration: f64,
    #[serde(default)]
    pub vehicle: VehicleParams,
    #[serde(default)]
    pub bounds: Bounds,
    pub road: RoadConfig,
    pub signal: SignalConfig,
    pub scheduling: SchedulingConfig,
    pub safety: SafetyConfig,
    pub mpc: MpcConfig,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub checks: CheckMode,
    #[serde(default)]
    pub entries: Vec<Entry>,
    #[serde(default)]
    pub lane_changes: Vec<LaneChangeIntent>,
}

impl ScenarioConfig {
    /// Every violated invariant, in a stable order.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut need = |ok: bool, msg: &str| {
            if !ok {
                out.push(msg.to_string());
            }
        };
        need(self.duration.is_finite() && self.duration >= 0.0, "duration must be finite and nonnegative");
        need(self.vehicle.validate().is_ok(), "vehicle parameters must be positive");
        need(self.bounds.validate().is_ok(), "bounds must be finite with lower <= upper");
        let r = &self.road;
        need(!r.lanes.is_empty(), "at least one lane is required");
        need(
            r.lanes.iter().all(|y| *y >= self.bounds.state_lower[1] && *y <= self.bounds.state_upper[1]),
            "lane centerlines must lie inside the lateral position bounds",
        );
        need(r.stop_line > self.bounds.state_lower[0] && r.stop_line < r.exit_position, "stop line must lie inside the zone");
        need(r.exit_position < self.bounds.state_upper[0], "exit position must lie below the longitudinal position bound");
        need(r.zone_extent >= r.exit_position, "zone extent must not precede the exit position");
        need(
            r.entry_speed >= self.bounds.state_lower[2] && r.entry_speed <= self.bounds.state_upper[2],
            "entry speed must respect the speed bounds",
        );
        let s = &self.signal;
        need(s.green > 0.0 && s.red > 0.0 && s.first_switch >= 0.0, "signal durations must be positive");
        need(s.horizon >= s.first_switch + s.green + s.red, "signal horizon must cover one full cycle");
        let c = &self.scheduling;
        need(c.tau_d >= 0.0 && 2.0 * c.tau_d < s.green, "tau_d must be nonnegative and shorter than half a green");
        need(c.rho_crit >= 1, "rho_crit must be at least 1");
        need(c.cruise_speed.is_none_or(|v| v > 0.0 && v <= self.bounds.state_upper[2]), "cruise speed must be within the speed bounds");
        let f = &self.safety;
        need(f.gamma > 0.0, "gamma must be positive");
        need(f.gamma_queue >= f.gamma, "gamma_queue must be at least gamma");
        need(f.d_eps >= 0.0, "d_eps must be nonnegative");
        need(f.sensor_range > 0.0, "sensor range must be positive");
        let m = &self.mpc;
        need(m.horizon >= 1, "horizon must be at least 1");
        need(m.ts > 0.0, "sampling time must be positive");
        need(m.q.iter().all(|v| *v > 0.0), "Q diagonal must be strictly positive");
        need(m.r.iter().all(|v| *v > 0.0), "R diagonal must be strictly positive");
        need(m.eps > 0.0 && m.eps < 1.0, "eps must lie in (0, 1)");
        let t = &self.tolerances;
        need(t.bounds >= 0.0 && t.gap >= 0.0 && t.stop_line >= 0.0 && t.lane > 0.0, "tolerances must be nonnegative");
        need(self.entries.iter().all(|e| e.time.is_finite() && e.time >= 0.0), "entry times must be nonnegative");
        need(self.entries.windows(2).all(|w| w[0].time <= w[1].time), "entry times must be nondecreasing");
        need(self.entries.iter().all(|e| e.lane >= 1 && e.lane <= r.lanes.len()), "entry lanes must exist");
        need(
            self.entries.windows(2).all(|w| w[0].time != w[1].time || w[0].lane != w[1].lane),
            "two vehicles cannot enter the same lane at the same time",
        );
        need(
            self.lane_changes.iter().all(|l| l.target_lane >= 1 && l.target_lane <= r.lanes.len() && l.time >= 0.0),
            "lane-change targets must be existing lanes",
        );
        need(
            self.lane_changes.iter().all(|l| l.vehicle >= 1 && (l.vehicle as usize) <= self.entries.len()),
            "lane-change vehicles must be scheduled entries",
        );
        out
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(SimError::InvalidConfig(p))
        }
    }

    pub fn weights_diag(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        (
            DMatrix::from_diagonal(&DVector::from_column_slice(&self.mpc.q)),
            DMatrix::from_diagonal(&DVector::from_column_slice(&self.mpc.r)),
        )
    }

    fn scheduling_params(&self) -> SchedulingParams {
        SchedulingParams {
            v_bounds: (self.bounds.state_lower[2], self.bounds.state_upper[2]),
            tau_d: self.scheduling.tau_d,
            rho_crit: self.scheduling.rho_crit,
            scan_all_windows: self.scheduling.scan_all_windows,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Normal,
    Lcv,
    FvT,
    LvT,
}

/// Avoidance row plus whether it refers to an anticipated slot rather than
/// a physical vehicle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaggedRow {
    pub row: AvoidanceRow,
    pub virtual_slot: bool,
}

/// A published plan: predicted states `x_{0..N}`, the inputs, the rows
/// each predicted state was constrained by, and the terminal set.
#[derive(Debug, Clone)]
pub struct Plan {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub rows: Vec<Vec<TaggedRow>>,
    pub terminal: Arc<Polytope>,
    pub x_r: DVector<f64>,
}

impl Plan {
    fn horizon(&self) -> usize {
        self.inputs.len()
    }

    /// Predicted position at `p` steps after the round that follows publication.
    fn ahead(&self, p: usize) -> [f64; 2] {
        let s = &self.states[(p + 1).min(self.horizon())];
        [s[0], s[1]]
    }
}

#[derive(Debug, Clone)]
pub struct VehicleAgent {
    pub id: u32,
    /// Zero-based lane index.
    pub lane: usize,
    pub state: DVector<f64>,
    pub directive: VelocityDirective,
    /// Targeted red interval in absolute time (stop modes only).
    pub target_red: Option<(f64, f64)>,
    pub queue_position: u32,
    pub crossed: bool,
    pub v_cap: Option<f64>,
    pub lateral_target: Option<usize>,
    pub plan: Option<Plan>,
    pub anticipated: Option<Vec<[f64; 2]>>,
    pub role: Role,
}

impl VehicleAgent {
    pub fn position(&self) -> [f64; 2] {
        [self.state[0], self.state[1]]
    }

    pub fn is_holding(&self) -> bool {
        self.directive.mode.is_stop()
    }

    pub fn reference(&self, cfg: &ScenarioConfig) -> DVector<f64> {
        let y = cfg.road.lanes[self.lateral_target.unwrap_or(self.lane)];
        let mut v = self.directive.v_ref;
        if self.crossed && !self.is_holding() {
            if let Some(c) = cfg.scheduling.cruise_speed {
                v = c;
            }
        }
        if let Some(cap) = self.v_cap {
            v = v.min(cap);
        }
        let x = if self.is_holding() {
            queue_reference(cfg.road.stop_line, self.queue_position, cfg.safety.gamma_queue)
        } else {
            cfg.road.zone_extent
        };
        crate::mpc::reference_point(x, y, v)
    }

    fn stop_limit(&self, cfg: &ScenarioConfig, t: f64) -> Option<StopLimit> {
        let (_, release) = self.target_red?;
        if !self.is_holding() {
            return None;
        }
        let steps = ((release - t) / cfg.mpc.ts - TIME_EPS).ceil().max(0.0) as usize;
        Some(StopLimit {
            xi_max: queue_reference(cfg.road.stop_line, self.queue_position, cfg.safety.gamma_queue),
            until_step: steps,
        })
    }
}

/// `stop_line − (q − 1)·γ_queue`
pub fn queue_reference(stop_line: f64, queue_position: u32, gamma_queue: f64) -> f64 {
    stop_line - (queue_position.max(1) - 1) as f64 * gamma_queue
}

/// Ids in admission order; entries sharing a time are shuffled by the seed.
pub fn admission_order(entries: &[Entry], seed: u64) -> Vec<(u32, Entry)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(entries.len());
    let mut i = 0;
    while i < entries.len() {
        let mut j = i + 1;
        while j < entries.len() && entries[j].time == entries[i].time {
            j += 1;
        }
        let mut group: Vec<Entry> = entries[i..j].to_vec();
        if group.len() > 1 {
            group.shuffle(&mut rng);
        }
        out.extend(group);
        i = j;
    }
    out.into_iter().enumerate().map(|(k, e)| ((k + 1) as u32, e)).collect()
}

/// Ids of agents within `range` of agent `idx`, boundary inclusive.
pub fn neighbors(idx: usize, agents: &[VehicleAgent], range: f64) -> Vec<u32> {
    let me = agents[idx].position();
    agents
        .iter()
        .enumerate()
        .filter(|(k, a)| *k != idx && dist(a.position(), me) <= range)
        .map(|(_, a)| a.id)
        .collect()
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Gap test for starting a lane change: the target-lane gap must exceed
/// `2γ`, or one of the bracketing vehicles must be out of sensor range.
pub fn lane_change_trigger(leader: Option<[f64; 2]>, follower: Option<[f64; 2]>, gamma: f64) -> bool {
    match (leader, follower) {
        (Some(l), Some(f)) => dist(l, f) > 2.0 * gamma,
        _ => true,
    }
}

/// Slot the lane changer aims for: `γ` behind the target-lane leader, on the
/// target centerline.
pub fn anticipated_position(leader_x: f64, target_y: f64, gamma: f64) -> [f64; 2] {
    [leader_x - gamma, target_y]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    /// Solver failed; the shifted previous plan was applied.
    Fallback,
    /// Solver failed and the shifted plan no longer fits the current rows
    /// (a new neighbour came into range); a minimum-violation plan was applied.
    Recovery,
    /// No plan to fall back on; maximum safe braking was applied.
    Brake,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub time: f64,
    pub vehicle_id: u32,
    /// One-based lane number.
    pub lane: usize,
    pub state: [f64; NX],
    pub input: [f64; 2],
    pub cost: f64,
    pub status: SolveStatus,
    pub qp_status: Option<OpStatus>,
    pub qp_iterations: usize,
    /// Scaled KKT residual of the QP; `None` when no QP was solved.
    pub kkt_residual: Option<f64>,
    pub mode: DirectiveMode,
    pub terminal_facets: usize,
    pub active_rows: usize,
    /// Distance to the nearest other vehicle; `None` when alone.
    pub min_gap: Option<f64>,
    /// Largest violation of this round's constraints by the shifted previous plan.
    pub candidate_violation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LaneChangeEvent {
    pub vehicle: u32,
    pub from_lane: usize,
    pub to_lane: usize,
    pub requested: f64,
    pub cooperating: Option<f64>,
    pub moving: Option<f64>,
    pub completed: Option<f64>,
    pub leader: Option<u32>,
    pub follower: Option<u32>,
    pub gap_at_trigger: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DirectiveEvent {
    pub time: f64,
    pub vehicle: u32,
    pub directive: VelocityDirective,
    pub target_red: Option<(f64, f64)>,
    pub queue_position: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    Gap { step: usize, vehicle: u32, other: u32, gap: f64 },
    Bound { step: usize, vehicle: u32, excess: f64 },
    StopLine { step: usize, vehicle: u32, xi_x: f64 },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Diagnostics {
    pub fallbacks: usize,
    pub brakes: usize,
    pub max_candidate_violation: f64,
    pub candidate_violations: usize,
    pub red_crossings: usize,
    pub recoveries: usize,
    /// Largest row violation accepted by a recovery plan.
    pub max_recovery_slack: f64,
    /// Fallbacks whose terminal extension left the previous terminal set.
    pub terminal_law_misses: usize,
    pub min_constrained_gap: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Timing {
    /// Wall-clock seconds per vehicle-round (terminal set plus QP).
    pub solve_seconds: Vec<f64>,
    pub terminal_seconds: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Trace {
    pub scenario: String,
    pub ts: f64,
    pub gamma: f64,
    pub records: Vec<StepRecord>,
    pub phases: Vec<(f64, f64, Phase)>,
    pub lane_changes: Vec<LaneChangeEvent>,
    pub directives: Vec<DirectiveEvent>,
    pub violations: Vec<Violation>,
    pub diagnostics: Diagnostics,
    pub aborted: bool,
    pub end_time: f64,
    #[serde(skip)]
    pub timing: Timing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LcPhase {
    Waiting,
    Cooperating,
    Moving,
    Done,
}

#[derive(Debug, Clone)]
struct LaneChange {
    intent: LaneChangeIntent,
    phase: LcPhase,
    leader: Option<u32>,
    follower: Option<u32>,
    event: Option<usize>,
}

/// Shared, read-only context for one round.
struct RoundCtx<'a> {
    cfg: &'a ScenarioConfig,
    controller: &'a Controller,
    u_set: &'a Polytope,
    t: f64,
    /// (follower, leader) pairs held to longitudinal separation.
    locks: Vec<(u32, u32)>,
    /// (ingesting vehicle, lane changer publishing the slot).
    slot: Option<(u32, u32)>,
}

struct Outcome {
    plan: Plan,
    input: DVector<f64>,
    cost: f64,
    status: SolveStatus,
    qp_status: Option<OpStatus>,
    qp_iterations: usize,
    kkt_residual: Option<f64>,
    /// Rows that constrained the state reached after applying `input`.
    applied_rows: Vec<TaggedRow>,
    candidate_violation: Option<f64>,
    solve_seconds: f64,
    terminal_seconds: f64,
    /// Terminal-set residual of the fallback extension, or the slack of a
    /// recovery plan.
    terminal_miss: f64,
}

pub struct Simulator {
    cfg: ScenarioConfig,
    model: DiscreteModel,
    controller: Controller,
    u_set: Polytope,
    order: Vec<(u32, Entry)>,
    next_entry: usize,
    agents: Vec<VehicleAgent>,
    lane_changes: Vec<LaneChange>,
    trace: Trace,
    k: usize,
    finished: bool,
}

impl Simulator {
    pub fn new(cfg: ScenarioConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let model = DiscreteModel::from_params(&cfg.vehicle, cfg.mpc.ts)?;
        let (q, r) = cfg.weights_diag();
        let p = terminal_weight(&model, &q, &r, cfg.mpc.eps)?;
        let controller = Controller::new(model.clone(), Weights { q, r, p }, cfg.mpc.horizon)?;
        let u_set = cfg.bounds.input_set()?;
        let order = admission_order(&cfg.entries, cfg.seed);
        let lane_changes = cfg
            .lane_changes
            .iter()
            .map(|&intent| LaneChange { intent, phase: LcPhase::Waiting, leader: None, follower: None, event: None })
            .collect();
        let trace = Trace {
            scenario: cfg.name.clone(),
            ts: cfg.mpc.ts,
            gamma: cfg.safety.gamma,
            records: Vec::new(),
            phases: Vec::new(),
            lane_changes: Vec::new(),
            directives: Vec::new(),
            violations: Vec::new(),
            diagnostics: Diagnostics::default(),
            aborted: false,
            end_time: 0.0,
            timing: Timing::default(),
        };
        Ok(Self {
            cfg,
            model,
            controller,
            u_set,
            order,
            next_entry: 0,
            agents: Vec::new(),
            lane_changes,
            trace,
            k: 0,
            finished: false,
        })
    }

    pub fn controller(&self) -> &Controller {
        &self.controller
    }

    pub fn agents(&self) -> &[VehicleAgent] {
        &self.agents
    }

    fn time(&self, k: usize) -> f64 {
        k as f64 * self.cfg.mpc.ts
    }

    fn directive_at(&self, id: u32, x: f64, t: f64) -> Result<(VelocityDirective, Option<(f64, f64)>), SimError> {
        let d = (self.cfg.road.stop_line - x).max(0.0);
        let info = self.cfg.signal.plan().info_at(t, self.cfg.signal.horizon);
        let dir = reference_velocity(d, id, &self.cfg.scheduling_params(), &info)?;
        Ok((dir, dir.red_interval.map(|(a, b)| (a + t, b + t))))
    }

    fn queue_position_of(&self, idx: usize) -> u32 {
        let me = &self.agents[idx];
        let Some(red) = me.target_red else { return 1 };
        let ahead = self
            .agents
            .iter()
            .filter(|a| {
                a.id != me.id
                    && a.lane == me.lane
                    && a.is_holding()
                    && a.target_red.is_some_and(|r| (r.0 - red.0).abs() < 1e-6)
                    && (a.state[0] > me.state[0] || (a.state[0] == me.state[0] && a.id < me.id))
            })
            .count();
        ahead as u32 + 1
    }

    fn log_directive(&mut self, idx: usize, t: f64) {
        let a = &self.agents[idx];
        self.trace.directives.push(DirectiveEvent {
            time: t,
            vehicle: a.id,
            directive: a.directive,
            target_red: a.target_red,
            queue_position: a.queue_position,
        });
    }

    /// Admits the next scheduled vehicle at time `t` into `lane`.
    pub fn admit(&mut self, t: f64, lane: usize) -> Result<&VehicleAgent, SimError> {
        let &(id, entry) = self.order.get(self.next_entry).ok_or(SimError::ScheduleExhausted)?;
        if entry.lane != lane + 1 || entry.time > t + TIME_EPS {
            return Err(SimError::InvalidConfig(vec![format!("vehicle {id} is not scheduled for lane {} at {t}", lane + 1)]));
        }
        self.next_entry += 1;
        let y = self.cfg.road.lanes[lane];
        let state = DVector::from_vec(vec![0.0, y, self.cfg.road.entry_speed, 0.0, 0.0, 0.0]);
        let (directive, target_red) = self.directive_at(id, 0.0, t)?;
        self.agents.push(VehicleAgent {
            id,
            lane,
            state,
            directive,
            target_red,
            queue_position: 1,
            crossed: false,
            v_cap: None,
            lateral_target: None,
            plan: None,
            anticipated: None,
            role: Role::Normal,
        });
        let idx = self.agents.len() - 1;
        self.agents[idx].queue_position = self.queue_position_of(idx);
        self.log_directive(idx, t);
        Ok(&self.agents[idx])
    }

    fn admit_due(&mut self, t: f64) -> Result<(), SimError> {
        while let Some(&(_, e)) = self.order.get(self.next_entry) {
            if e.time > t + TIME_EPS {
                break;
            }
            self.admit(t, e.lane - 1)?;
        }
        Ok(())
    }

    /// Releases held vehicles whose targeted red has ended and re-issues
    /// their directive from the remaining distance.
    fn update_directives(&mut self, t: f64) -> Result<(), SimError> {
        for idx in 0..self.agents.len() {
            let a = &self.agents[idx];
            let release = a.is_holding() && a.target_red.is_some_and(|(_, g)| t + TIME_EPS >= g);
            if release {
                let (dir, red) = self.directive_at(a.id, a.state[0], t)?;
                self.agents[idx].directive = dir;
                self.agents[idx].target_red = red;
                self.agents[idx].queue_position = 1;
                self.agents[idx].queue_position = self.queue_position_of(idx);
                self.log_directive(idx, t);
            }
            let a = &mut self.agents[idx];
            if !a.crossed && a.state[0] > self.cfg.road.stop_line {
                a.crossed = true;
            }
        }
        Ok(())
    }

    fn round_ctx(&self, t: f64) -> RoundCtx<'_> {
        let mut locks = Vec::new();
        let mut slot = None;
        for lc in &self.lane_changes {
            match lc.phase {
                LcPhase::Cooperating | LcPhase::Moving => {
                    if let Some(f) = lc.follower {
                        slot = Some((f, lc.intent.vehicle));
                    }
                    if lc.phase == LcPhase::Moving {
                        if let Some(l) = lc.leader {
                            locks.push((lc.intent.vehicle, l));
                        }
                        if let Some(f) = lc.follower {
                            locks.push((f, lc.intent.vehicle));
                        }
                    }
                }
                _ => {}
            }
        }
        RoundCtx { cfg: &self.cfg, controller: &self.controller, u_set: &self.u_set, t, locks, slot }
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    /// Current round index.
    pub fn round_index(&self) -> usize {
        self.k
    }

    /// Advances one round. Returns `false` once the run is over: duration
    /// reached, zone empty with nobody left to enter, or a strict abort.
    pub fn step_round(&mut self) -> Result<bool, SimError> {
        let steps = (self.cfg.duration / self.cfg.mpc.ts + TIME_EPS).floor() as usize;
        if self.finished || self.k >= steps {
            self.finished = true;
            return Ok(false);
        }
        let t = self.time(self.k);
        self.admit_due(t)?;
        if self.agents.is_empty() && self.next_entry >= self.order.len() {
            self.finished = true;
            return Ok(false);
        }
        self.update_directives(t)?;
        let ok = self.round(self.k)?;
        self.k += 1;
        if !ok {
            self.finished = true;
        }
        Ok(ok)
    }

    /// Runs to the configured duration or until the zone is empty and the
    /// schedule exhausted.
    pub fn run(mut self) -> Result<Trace, SimError> {
        while self.step_round()? {}
        let end = self.time(self.k);
        self.trace.end_time = end;
        self.trace.phases = self.cfg.signal.plan().intervals(0.0, end.max(self.cfg.mpc.ts));
        Ok(self.trace)
    }

    /// One synchronous round. Returns `false` when a strict check aborted the run.
    fn round(&mut self, k: usize) -> Result<bool, SimError> {
        let t = self.time(k);
        let ctx = self.round_ctx(t);
        let agents = &self.agents;
        let outcomes: Vec<Outcome> =
            (0..agents.len()).into_par_iter().map(|i| plan_vehicle(i, agents, &ctx)).collect::<Result<_, _>>()?;
        drop(ctx);

        let cfg = self.cfg.clone();
        let tol = cfg.tolerances;
        let mut violations = Vec::new();
        // Records at time t.
        let positions: Vec<[f64; 2]> = self.agents.iter().map(|a| a.position()).collect();
        for (i, (a, o)) in self.agents.iter().zip(&outcomes).enumerate() {
            let min_gap = positions
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, p)| dist(*p, positions[i]))
                .fold(None, |m: Option<f64>, d| Some(m.map_or(d, |m| m.min(d))));
            let s = &a.state;
            self.trace.records.push(StepRecord {
                step: k,
                time: t,
                vehicle_id: a.id,
                lane: a.lane + 1,
                state: [s[0], s[1], s[2], s[3], s[4], s[5]],
                input: [o.input[0], o.input[1]],
                cost: o.cost,
                status: o.status,
                qp_status: o.qp_status,
                qp_iterations: o.qp_iterations,
                kkt_residual: o.kkt_residual,
                mode: a.directive.mode,
                terminal_facets: o.plan.terminal.n_facets(),
                active_rows: o.applied_rows.iter().filter(|r| !r.virtual_slot).count(),
                min_gap,
                candidate_violation: o.candidate_violation,
            });
            self.trace.timing.solve_seconds.push(o.solve_seconds);
            self.trace.timing.terminal_seconds.push(o.terminal_seconds);
            let d = &mut self.trace.diagnostics;
            match o.status {
                SolveStatus::Optimal => {}
                SolveStatus::Fallback => d.fallbacks += 1,
                SolveStatus::Recovery => d.recoveries += 1,
                SolveStatus::Brake => d.brakes += 1,
            }
            if let Some(v) = o.candidate_violation {
                d.max_candidate_violation = d.max_candidate_violation.max(v);
                if v > 1e-6 {
                    d.candidate_violations += 1;
                }
            }
            if o.status == SolveStatus::Fallback && o.terminal_miss > CANDIDATE_TOL {
                d.terminal_law_misses += 1;
            }
            if o.status == SolveStatus::Recovery {
                d.max_recovery_slack = d.max_recovery_slack.max(o.terminal_miss);
            }
        }

        // Apply inputs.
        for (a, o) in self.agents.iter_mut().zip(outcomes.iter()) {
            let before = a.state[0];
            a.state = self.model.step_vec(&a.state, &o.input);
            let stop = cfg.road.stop_line;
            if before <= stop && a.state[0] > stop {
                let (phase, _) = cfg.signal.plan().phase_at(t + cfg.mpc.ts);
                if phase == Phase::Red {
                    self.trace.diagnostics.red_crossings += 1;
                }
            }
        }

        // Checks at time t + ts.
        let step = k + 1;
        let pos: std::collections::HashMap<u32, [f64; 2]> = self.agents.iter().map(|a| (a.id, a.position())).collect();
        for (a, o) in self.agents.iter().zip(&outcomes) {
            let excess = state_excess(&cfg.bounds, &a.state).max(input_excess(&cfg.bounds, &o.input));
            if excess > tol.bounds {
                violations.push(Violation::Bound { step, vehicle: a.id, excess });
            }
            for r in o.applied_rows.iter().filter(|r| !r.virtual_slot) {
                let Some(pj) = pos.get(&r.row.source) else { continue };
                let w = r.row.normal.w();
                let gap = w[0] * (pj[0] - a.state[0]) + w[1] * (pj[1] - a.state[1]);
                let d = &mut self.trace.diagnostics;
                d.min_constrained_gap = Some(d.min_constrained_gap.map_or(gap, |m| m.min(gap)));
                if gap < cfg.safety.gamma - tol.gap {
                    violations.push(Violation::Gap { step, vehicle: a.id, other: r.row.source, gap });
                }
            }
            if a.is_holding()
                && a.target_red.is_some_and(|(r, g)| t + cfg.mpc.ts >= r && t + cfg.mpc.ts < g - TIME_EPS)
                && a.state[0] > cfg.road.stop_line + tol.stop_line
            {
                violations.push(Violation::StopLine { step, vehicle: a.id, xi_x: a.state[0] });
            }
        }

        // Publish.
        for (a, o) in self.agents.iter_mut().zip(outcomes) {
            a.plan = Some(o.plan);
        }

        self.lane_change_logic(t)?;

        self.agents.retain(|a| a.state[0] < cfg.road.exit_position);

        let abort = !violations.is_empty() && cfg.checks == CheckMode::Strict;
        self.trace.violations.extend(violations);
        if abort {
            self.trace.aborted = true;
        }
        Ok(!abort)
    }

    fn find(&self, id: u32) -> Option<&VehicleAgent> {
        self.agents.iter().find(|a| a.id == id)
    }

    fn find_idx(&self, id: u32) -> Option<usize> {
        self.agents.iter().position(|a| a.id == id)
    }

    /// Nearest target-lane vehicles ahead of and behind the lane changer
    /// within sensor range.
    fn bracket(&self, lcv: &VehicleAgent, target: usize) -> (Option<u32>, Option<u32>) {
        let mut lead: Option<&VehicleAgent> = None;
        let mut follow: Option<&VehicleAgent> = None;
        for a in &self.agents {
            if a.id == lcv.id || a.lane != target || dist(a.position(), lcv.position()) > self.cfg.safety.sensor_range {
                continue;
            }
            if a.state[0] >= lcv.state[0] {
                if lead.is_none_or(|l| a.state[0] < l.state[0]) {
                    lead = Some(a);
                }
            } else if follow.is_none_or(|f| a.state[0] > f.state[0]) {
                follow = Some(a);
            }
        }
        (lead.map(|a| a.id), follow.map(|a| a.id))
    }

    fn anticipated_slot(&self, lcv: &VehicleAgent, leader: Option<u32>, target_y: f64) -> Option<Vec<[f64; 2]>> {
        let own = lcv.plan.as_ref()?;
        let lead = leader.and_then(|l| self.find(l)).and_then(|l| l.plan.as_ref());
        let n = own.horizon();
        Some(
            (0..=n)
                .map(|q| {
                    let x = own.states[q][0];
                    match lead {
                        Some(lp) => [anticipated_position(lp.states[q][0], target_y, self.cfg.safety.gamma)[0].min(x), target_y],
                        None => [x, target_y],
                    }
                })
                .collect(),
        )
    }

    /// Whether `id` keeps a feasible shifted candidate next round under the
    /// given locks and slot ingestion.
    fn feasible_next(&self, id: u32, locks: &[(u32, u32)], slot: Option<(u32, u32)>, t_next: f64) -> Result<bool, SimError> {
        let Some(idx) = self.find_idx(id) else { return Ok(true) };
        let ctx = RoundCtx {
            cfg: &self.cfg,
            controller: &self.controller,
            u_set: &self.u_set,
            t: t_next,
            locks: locks.to_vec(),
            slot,
        };
        candidate_feasible(idx, &self.agents, &ctx)
    }

    fn set_roles(&mut self, lcv: u32, leader: Option<u32>, follower: Option<u32>, active: bool) {
        for a in &mut self.agents {
            if a.id == lcv {
                a.role = if active { Role::Lcv } else { Role::Normal };
            } else if Some(a.id) == leader {
                a.role = if active { Role::LvT } else { Role::Normal };
            } else if Some(a.id) == follower {
                a.role = if active { Role::FvT } else { Role::Normal };
            } else if active && matches!(a.role, Role::LvT | Role::FvT) {
                a.role = Role::Normal;
            }
        }
    }

    fn lane_change_logic(&mut self, t: f64) -> Result<(), SimError> {
        let gamma = self.cfg.safety.gamma;
        for n in 0..self.lane_changes.len() {
            let lc = self.lane_changes[n].clone();
            if lc.phase == LcPhase::Done || t + TIME_EPS < lc.intent.time {
                continue;
            }
            // Only one maneuver at a time.
            if self.lane_changes.iter().enumerate().any(|(m, o)| m != n && matches!(o.phase, LcPhase::Cooperating | LcPhase::Moving)) {
                continue;
            }
            let Some(idx) = self.find_idx(lc.intent.vehicle) else {
                let admitted = self.order[..self.next_entry].iter().any(|(id, _)| *id == lc.intent.vehicle);
                if admitted {
                    // Left the zone before finishing.
                    if let Some(k) = lc.follower.and_then(|f| self.find_idx(f)) {
                        self.agents[k].v_cap = None;
                    }
                    self.set_roles(lc.intent.vehicle, lc.leader, lc.follower, false);
                    self.lane_changes[n].phase = LcPhase::Done;
                }
                continue;
            };
            let target = lc.intent.target_lane - 1;
            let lcv = self.agents[idx].clone();
            if lc.phase == LcPhase::Waiting && lcv.lane == target {
                self.lane_changes[n].phase = LcPhase::Done;
                continue;
            }
            let event = match lc.event {
                Some(e) => e,
                None => {
                    self.trace.lane_changes.push(LaneChangeEvent {
                        vehicle: lcv.id,
                        from_lane: lcv.lane + 1,
                        to_lane: target + 1,
                        requested: t,
                        cooperating: None,
                        moving: None,
                        completed: None,
                        leader: None,
                        follower: None,
                        gap_at_trigger: None,
                    });
                    let e = self.trace.lane_changes.len() - 1;
                    self.lane_changes[n].event = Some(e);
                    e
                }
            };
            let target_y = self.cfg.road.lanes[target];
            match lc.phase {
                LcPhase::Waiting | LcPhase::Cooperating => {
                    let (lead, follow) = self.bracket(&lcv, target);
                    let lp = lead.and_then(|l| self.find(l)).map(|a| a.position());
                    let fp = follow.and_then(|f| self.find(f)).map(|a| a.position());
                    let t_next = t + self.cfg.mpc.ts;
                    let slot = self.anticipated_slot(&lcv, lead, target_y);
                    // Publish provisionally so the follower's check sees the slot.
                    self.agents[idx].anticipated = slot.clone();
                    let committed = lc.phase == LcPhase::Cooperating && lc.follower == follow;
                    let slot_pair = follow.map(|f| (f, lcv.id));
                    let follower_ok = match follow {
                        Some(f) if !committed => self.feasible_next(f, &[], slot_pair, t_next)?,
                        _ => true,
                    };
                    // A follower other than the current one keeps no cap.
                    if let Some(old) = lc.follower.filter(|f| Some(*f) != follow) {
                        if let Some(k) = self.find_idx(old) {
                            self.agents[k].v_cap = None;
                        }
                    }
                    let triggered = lane_change_trigger(lp, fp, gamma) && slot.is_some();
                    if !(triggered && follower_ok) {
                        self.agents[idx].anticipated = None;
                        if lc.phase == LcPhase::Cooperating {
                            self.agents[idx].v_cap = None;
                            self.set_roles(lcv.id, lc.leader, lc.follower, false);
                            self.lane_changes[n].phase = LcPhase::Waiting;
                        }
                        self.lane_changes[n].follower = None;
                        match (triggered, follow.and_then(|f| self.find_idx(f))) {
                            // Gap is wide enough but the follower must drop back first.
                            (true, Some(k)) => {
                                self.agents[k].v_cap = Some((lcv.state[2] - REPOSITION_SPEED_DROP).max(0.0));
                                self.lane_changes[n].follower = follow;
                            }
                            (false, Some(k)) => self.agents[k].v_cap = None,
                            _ => {}
                        }
                        continue;
                    }
                    if let Some(k) = follow.and_then(|f| self.find_idx(f)) {
                        self.agents[k].v_cap = None;
                    }
                    if lc.phase == LcPhase::Waiting {
                        let ev = &mut self.trace.lane_changes[event];
                        ev.cooperating = Some(t);
                        ev.gap_at_trigger = match (lp, fp) {
                            (Some(l), Some(f)) => Some(dist(l, f)),
                            _ => None,
                        };
                    }
                    self.lane_changes[n].phase = LcPhase::Cooperating;
                    self.lane_changes[n].leader = lead;
                    self.lane_changes[n].follower = follow;
                    self.set_roles(lcv.id, lead, follow, true);
                    let mut locks = Vec::new();
                    locks.extend(lead.map(|l| (lcv.id, l)));
                    locks.extend(follow.map(|f| (f, lcv.id)));
                    let lcv_ok = self.feasible_next(lcv.id, &locks, slot_pair, t_next)?;
                    let follower_ok = match follow {
                        Some(f) => self.feasible_next(f, &locks, slot_pair, t_next)?,
                        None => true,
                    };
                    if lcv_ok && follower_ok {
                        self.lane_changes[n].phase = LcPhase::Moving;
                        self.agents[idx].v_cap = None;
                        self.agents[idx].lateral_target = Some(target);
                        let ev = &mut self.trace.lane_changes[event];
                        ev.moving = Some(t);
                        ev.leader = lead;
                        ev.follower = follow;
                    } else if !lcv_ok {
                        // Too close behind the target leader: drop back.
                        let v_lead = lead.and_then(|l| self.find(l)).map_or(0.0, |a| a.state[2]);
                        self.agents[idx].v_cap = Some((v_lead - REPOSITION_SPEED_DROP).max(0.0));
                    } else {
                        self.agents[idx].v_cap = None;
                    }
                }
                LcPhase::Moving => {
                    let slot = self.anticipated_slot(&lcv, lc.leader, target_y);
                    self.agents[idx].anticipated = slot;
                    if (lcv.state[1] - target_y).abs() <= self.cfg.tolerances.lane {
                        let from = lcv.lane;
                        let a = &mut self.agents[idx];
                        a.lane = target;
                        a.lateral_target = None;
                        a.anticipated = None;
                        self.set_roles(lcv.id, lc.leader, lc.follower, false);
                        self.lane_changes[n].phase = LcPhase::Done;
                        self.trace.lane_changes[event].completed = Some(t + self.cfg.mpc.ts);
                        self.requeue(&[from, target], t);
                    }
                }
                LcPhase::Done => {}
            }
        }
        Ok(())
    }

    fn requeue(&mut self, lanes: &[usize], t: f64) {
        for idx in 0..self.agents.len() {
            let a = &self.agents[idx];
            if a.is_holding() && lanes.contains(&a.lane) {
                let q = self.queue_position_of(idx);
                if q != a.queue_position {
                    self.agents[idx].queue_position = q;
                    self.log_directive(idx, t);
                }
            }
        }
    }
}

pub fn simulate(config: ScenarioConfig) -> Result<Trace, SimError> {
    Simulator::new(config)?.run()
}

fn state_excess(b: &Bounds, x: &DVector<f64>) -> f64 {
    (0..NX).map(|i| (x[i] - b.state_upper[i]).max(b.state_lower[i] - x[i])).fold(0.0, f64::max)
}

fn input_excess(b: &Bounds, u: &DVector<f64>) -> f64 {
    (0..2).map(|i| (u[i] - b.input_upper[i]).max(b.input_lower[i] - u[i])).fold(0.0, f64::max)
}

/// Predicted positions for the coming round: the published plan shifted by
/// one step, or a coasting rollout for a vehicle that has not planned yet.
fn guess(a: &VehicleAgent, model: &DiscreteModel, n: usize) -> Vec<[f64; 2]> {
    match &a.plan {
        Some(p) => (0..=n).map(|k| p.ahead(k)).collect(),
        None => {
            let zeros = vec![DVector::zeros(2); n];
            rollout(model, &a.state, &zeros).iter().map(|s| [s[0], s[1]]).collect()
        }
    }
}

fn select_rows(i: usize, agents: &[VehicleAgent], ctx: &RoundCtx) -> Vec<Vec<TaggedRow>> {
    let cfg = ctx.cfg;
    let n = cfg.mpc.horizon;
    let me = &agents[i];
    let model = &ctx.controller.model;
    let mine = guess(me, model, n);
    let mut rows: Vec<Vec<TaggedRow>> = vec![Vec::new(); n + 1];
    let gamma = cfg.safety.gamma;
    for other in agents {
        if other.id == me.id || other.plan.is_none() || dist(other.position(), me.position()) > cfg.safety.sensor_range {
            continue;
        }
        let theirs = guess(other, model, n);
        let locked_behind = ctx.locks.contains(&(me.id, other.id));
        let locked_ahead = ctx.locks.contains(&(other.id, me.id));
        for p in 1..=n {
            let normal = if locked_behind {
                Some(ActiveNormal::Ahead)
            } else if locked_ahead {
                None
            } else {
                let px = theirs[p][0] - mine[p][0];
                let py = theirs[p][1] - mine[p][1];
                if px == 0.0 && py.abs() <= cfg.safety.d_eps {
                    (other.id < me.id).then_some(ActiveNormal::Ahead)
                } else {
                    active_halfplane(px, py, cfg.safety.d_eps)
                }
            };
            if let Some(w) = normal {
                let (_, rhs) = avoidance_row(w, theirs[p], gamma);
                rows[p].push(TaggedRow { row: AvoidanceRow { normal: w, rhs, source: other.id }, virtual_slot: false });
            }
        }
    }
    if let Some((fv, lcv)) = ctx.slot {
        if fv == me.id {
            if let Some(slot) = agents.iter().find(|a| a.id == lcv).and_then(|a| a.anticipated.as_ref()) {
                for p in 1..=n {
                    let s = slot[(p + 1).min(slot.len() - 1)];
                    let (_, rhs) = avoidance_row(ActiveNormal::Ahead, s, gamma);
                    rows[p].push(TaggedRow {
                        row: AvoidanceRow { normal: ActiveNormal::Ahead, rhs, source: lcv },
                        virtual_slot: true,
                    });
                }
            }
        }
    }
    rows
}

struct Problem {
    tagged: Vec<Vec<TaggedRow>>,
    constraints: ProblemConstraints,
    terminal: Polytope,
    x_r: DVector<f64>,
    terminal_seconds: f64,
}

fn build_problem(i: usize, agents: &[VehicleAgent], ctx: &RoundCtx) -> Result<Problem, SimError> {
    let cfg = ctx.cfg;
    let n = cfg.mpc.horizon;
    let me = &agents[i];
    let tagged = select_rows(i, agents, ctx);
    let plain: Vec<Vec<AvoidanceRow>> = tagged.iter().map(|s| s.iter().map(|r| r.row).collect()).collect();
    let stacked = stack(&cfg.bounds, plain, n, me.stop_limit(cfg, ctx.t))?;
    let mut constraints = ProblemConstraints::from_stacked(&stacked);
    // Never plan to be behind last round's published positions.
    if let Some(prev) = &me.plan {
        for p in 1..n {
            let (h, g) = &mut constraints.state[p];
            let mut row = DMatrix::zeros(1, NX);
            row[(0, 0)] = -1.0;
            *h = DMatrix::from_rows(&h.row_iter().chain(row.row_iter()).collect::<Vec<_>>());
            let mut g2 = g.as_slice().to_vec();
            g2.push(-(prev.states[p + 1][0] - PROMISE_SLACK));
            *g = DVector::from_vec(g2);
        }
    }
    let t0 = Instant::now();
    let terminal = maximal_control_invariant_decomposed(&stacked.state_set(n)?, ctx.u_set, &ctx.controller.model, DEFAULT_MAX_ITER)?.set;
    Ok(Problem { tagged, constraints, terminal, x_r: me.reference(cfg), terminal_seconds: t0.elapsed().as_secs_f64() })
}

/// Previous plan shifted by one step and extended by the terminal law, plus
/// how far the extension lands outside the previous terminal set.
fn shifted_candidate(me: &VehicleAgent, ctl: &Controller, u_set: &Polytope) -> Result<Option<(Candidate, f64)>, SimError> {
    let Some(prev) = &me.plan else { return Ok(None) };
    let n = prev.horizon();
    let x_n = &prev.states[n];
    let (mu, miss) = match terminal_control_law(x_n, &prev.x_r, &ctl.model, &ctl.weights, &prev.terminal, u_set) {
        Ok(mu) => (mu, 0.0),
        Err(MpcError::InvariantViolation(_)) => least_violation_input(x_n, &ctl.model, &ctl.weights.r, &prev.terminal, u_set)?,
        Err(e) => return Err(e.into()),
    };
    let prev_sol = OpSolution {
        inputs: prev.inputs.clone(),
        states: prev.states.clone(),
        cost: 0.0,
        status: OpStatus::Optimal,
        kkt_residual: 0.0,
        iterations: 0,
    };
    Ok(Some((shift_feasible_solution(&prev_sol, &mu, &ctl.model), miss)))
}

/// Whether vehicle `i` would keep a feasible shifted candidate next round.
fn candidate_feasible(i: usize, agents: &[VehicleAgent], ctx: &RoundCtx) -> Result<bool, SimError> {
    let Some((c, _)) = shifted_candidate(&agents[i], ctx.controller, ctx.u_set)? else { return Ok(false) };
    let pr = build_problem(i, agents, ctx)?;
    Ok(ctx.controller.candidate_violation(&agents[i].state, &c.inputs, &pr.constraints, &pr.terminal)? <= CANDIDATE_TOL)
}

fn plan_vehicle(i: usize, agents: &[VehicleAgent], ctx: &RoundCtx) -> Result<Outcome, SimError> {
    let start = Instant::now();
    let cfg = ctx.cfg;
    let n = cfg.mpc.horizon;
    let me = &agents[i];
    let ctl = ctx.controller;
    let model = &ctl.model;
    let Problem { tagged, constraints, terminal, x_r, terminal_seconds } = build_problem(i, agents, ctx)?;
    let candidate = shifted_candidate(me, ctl, ctx.u_set)?;
    let candidate_violation = match &candidate {
        Some((c, _)) => Some(ctl.candidate_violation(&me.state, &c.inputs, &constraints, &terminal)?),
        None => None,
    };

    let terminal = Arc::new(terminal);
    let sol = if terminal.is_empty()? { None } else { Some(ctl.solve(&me.state, &x_r, &constraints, &terminal)?) };
    let qp_status = sol.as_ref().map(|s| s.status);
    let qp_iterations = sol.as_ref().map_or(0, |s| s.iterations);
    let kkt_residual = sol.as_ref().map(|s| s.kkt_residual).filter(|r| r.is_finite());
    let solve_seconds = start.elapsed().as_secs_f64();
    let optimal = sol.as_ref().is_some_and(|s| s.status == OpStatus::Optimal);
    // The shifted plan only witnesses feasibility against the rows it was
    // built for; when new rows break it, plan for least violation instead.
    let recovery = if !optimal && me.plan.is_some() && candidate_violation.is_some_and(|v| v > CANDIDATE_TOL) {
        Some(ctl.solve_soft(&me.state, &x_r, &constraints, &terminal, RECOVERY_PENALTY)?).filter(|(s, _)| s.status == OpStatus::Optimal)
    } else {
        None
    };
    match (sol, recovery, &me.plan, candidate) {
        (Some(s), _, _, _) if s.status == OpStatus::Optimal => {
            let input = s.inputs[0].clone();
            let applied_rows = tagged[1].clone();
            Ok(Outcome {
                plan: Plan { states: s.states, inputs: s.inputs, rows: tagged, terminal, x_r },
                input,
                cost: s.cost,
                status: SolveStatus::Optimal,
                qp_status,
                qp_iterations,
                kkt_residual,
                applied_rows,
                candidate_violation,
                solve_seconds,
                terminal_seconds,
                terminal_miss: 0.0,
            })
        }
        (_, Some((s, slack)), _, _) => {
            let input = s.inputs[0].clone();
            let applied_rows = tagged[1].clone();
            Ok(Outcome {
                plan: Plan { states: s.states, inputs: s.inputs, rows: tagged, terminal, x_r },
                input,
                cost: s.cost,
                status: SolveStatus::Recovery,
                qp_status,
                qp_iterations,
                kkt_residual,
                applied_rows,
                candidate_violation,
                solve_seconds: start.elapsed().as_secs_f64(),
                terminal_seconds,
                terminal_miss: slack,
            })
        }
        (_, None, Some(prev), Some((c, miss))) => {
            let mut rows: Vec<Vec<TaggedRow>> = prev.rows[1..].to_vec();
            rows.push(prev.rows[n].clone());
            let input = c.inputs[0].clone();
            let applied_rows = rows[1].clone();
            let cost = sequence_cost(&c.states, &c.inputs, &prev.x_r, &ctl.weights);
            Ok(Outcome {
                plan: Plan { states: c.states, inputs: c.inputs, rows, terminal: prev.terminal.clone(), x_r: prev.x_r.clone() },
                input,
                cost,
                status: SolveStatus::Fallback,
                qp_status,
                qp_iterations,
                kkt_residual,
                applied_rows,
                candidate_violation,
                solve_seconds,
                terminal_seconds,
                terminal_miss: miss,
            })
        }
        _ => {
            // Nothing to fall back on: brake to a stop.
            let mut inputs = Vec::with_capacity(n);
            let mut x = me.state.clone();
            for _ in 0..n {
                let a = cfg.bounds.input_lower[0].max(-x[2] / cfg.mpc.ts).min(cfg.bounds.input_upper[0]);
                let u = DVector::from_vec(vec![a, 0.0]);
                x = model.step_vec(&x, &u);
                inputs.push(u);
            }
            let states = rollout(model, &me.state, &inputs);
            let cost = sequence_cost(&states, &inputs, &x_r, &ctl.weights);
            Ok(Outcome {
                input: inputs[0].clone(),
                plan: Plan { states, inputs, rows: vec![Vec::new(); n + 1], terminal, x_r },
                cost,
                status: SolveStatus::Brake,
                qp_status,
                qp_iterations,
                kkt_residual,
                applied_rows: Vec::new(),
                candidate_violation,
                solve_seconds,
                terminal_seconds,
                terminal_miss: 0.0,
            })
        }
    }
}
