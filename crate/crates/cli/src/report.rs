use junction_mpc::signal::Phase;
use junction_mpc::sim::{CheckMode, Diagnostics, LaneChangeEvent, ScenarioConfig, Trace, Violation};
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct TimingSummary {
    pub vehicle_iterations: usize,
    pub mean_solve_s: f64,
    pub max_solve_s: f64,
    pub mean_terminal_s: f64,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckSummary {
    pub mode: CheckMode,
    pub aborted: bool,
    pub gap_violations: usize,
    pub bound_violations: usize,
    pub stop_line_violations: usize,
    /// Smallest `wᵀ(ξʲ − ξⁱ)` over every checked avoidance row.
    pub min_constrained_gap_m: Option<f64>,
    pub first_violation: Option<Violation>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub horizon: usize,
    pub vehicles: usize,
    pub rounds: usize,
    pub end_time_s: f64,
    pub timing: TimingSummary,
    pub checks: CheckSummary,
    pub diagnostics: Diagnostics,
    pub lane_changes: Vec<LaneChangeEvent>,
    pub signal: Vec<(f64, f64, Phase)>,
    pub files: Vec<String>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl RunReport {
    pub fn new(cfg: &ScenarioConfig, trace: &Trace, wall_clock_s: f64, files: Vec<String>) -> Self {
        let count = |f: fn(&Violation) -> bool| trace.violations.iter().filter(|v| f(v)).count();
        let mut ids: Vec<u32> = trace.records.iter().map(|r| r.vehicle_id).collect();
        ids.sort_unstable();
        ids.dedup();
        let t = &trace.timing;
        RunReport {
            scenario: cfg.name.clone(),
            seed: cfg.seed,
            horizon: cfg.mpc.horizon,
            vehicles: ids.len(),
            rounds: trace.records.last().map_or(0, |r| r.step + 1),
            end_time_s: trace.end_time,
            timing: TimingSummary {
                vehicle_iterations: t.solve_seconds.len(),
                mean_solve_s: mean(&t.solve_seconds),
                max_solve_s: t.solve_seconds.iter().copied().fold(0.0, f64::max),
                mean_terminal_s: mean(&t.terminal_seconds),
                wall_clock_s,
            },
            checks: CheckSummary {
                mode: cfg.checks,
                aborted: trace.aborted,
                gap_violations: count(|v| matches!(v, Violation::Gap { .. })),
                bound_violations: count(|v| matches!(v, Violation::Bound { .. })),
                stop_line_violations: count(|v| matches!(v, Violation::StopLine { .. })),
                min_constrained_gap_m: trace.diagnostics.min_constrained_gap,
                first_violation: trace.violations.first().cloned(),
            },
            diagnostics: trace.diagnostics.clone(),
            lane_changes: trace.lane_changes.clone(),
            signal: trace.phases.clone(),
            files,
        }
    }
}
