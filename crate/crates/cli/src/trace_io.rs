//! Delimited-text trace: one row per vehicle per step.

use std::collections::BTreeMap;
use std::path::Path;

use junction_mpc::sim::{SolveStatus, Trace};
use junction_mpc::vehicle::Bounds;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const COLUMNS: [&str; 15] = [
    "step",
    "time_s",
    "vehicle_id",
    "lane",
    "xi_x",
    "xi_y",
    "v_x",
    "v_y",
    "psi",
    "omega",
    "a",
    "delta",
    "cost_J",
    "solver_status",
    "min_gap_m",
];

const SIG_DIGITS: i32 = 9;

/// Shortest of fixed or exponent notation carrying 9 significant digits,
/// with trailing zeros removed.
pub fn fmt_sig(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let sci = format!("{:.*e}", (SIG_DIGITS - 1) as usize, v);
    let (mant, exp) = sci.split_once('e').expect("exponent notation");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..SIG_DIGITS).contains(&exp) {
        let decimals = (SIG_DIGITS - 1 - exp).max(0) as usize;
        trim(format!("{v:.decimals$}"))
    } else {
        format!("{}e{exp}", trim(mant.to_string()))
    }
}

fn trim(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

pub fn status_label(s: SolveStatus) -> &'static str {
    match s {
        SolveStatus::Optimal => "optimal",
        SolveStatus::Fallback => "fallback",
        SolveStatus::Recovery => "recovery",
        SolveStatus::Brake => "brake",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub time_s: f64,
    pub vehicle_id: u32,
    pub lane: usize,
    pub xi_x: f64,
    pub xi_y: f64,
    pub v_x: f64,
    pub v_y: f64,
    pub psi: f64,
    pub omega: f64,
    pub a: f64,
    pub delta: f64,
    #[serde(rename = "cost_J")]
    pub cost_j: f64,
    pub solver_status: String,
    pub min_gap_m: Option<f64>,
}

impl TraceRow {
    pub fn state(&self) -> [f64; 6] {
        [self.xi_x, self.xi_y, self.v_x, self.v_y, self.psi, self.omega]
    }
}

/// Nearest-neighbour distance per row among rows of the same step, in row
/// order. Positions are taken as given, so applying this to rows read back
/// from disk reproduces the written column exactly.
pub fn min_gaps(rows: &[([f64; 2], usize)]) -> Vec<Option<f64>> {
    let mut by_step: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, (_, step)) in rows.iter().enumerate() {
        by_step.entry(*step).or_default().push(i);
    }
    let mut out = vec![None; rows.len()];
    for idx in by_step.values() {
        for &i in idx {
            let p = rows[i].0;
            out[i] = idx
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| {
                    let q = rows[j].0;
                    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
                })
                .reduce(f64::min);
        }
    }
    out
}

fn rounded(v: f64) -> f64 {
    fmt_sig(v).parse().expect("formatted float parses")
}

pub fn write_trace(trace: &Trace, path: &Path) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Csv { path: path.to_path_buf(), source: e })?;
    let csv_err = |e| CliError::Csv { path: path.to_path_buf(), source: e };
    w.write_record(COLUMNS).map_err(csv_err)?;
    let positions: Vec<([f64; 2], usize)> =
        trace.records.iter().map(|r| ([rounded(r.state[0]), rounded(r.state[1])], r.step)).collect();
    let gaps = min_gaps(&positions);
    for (r, gap) in trace.records.iter().zip(gaps) {
        let s = &r.state;
        w.write_record([
            r.step.to_string(),
            fmt_sig(r.time),
            r.vehicle_id.to_string(),
            r.lane.to_string(),
            fmt_sig(s[0]),
            fmt_sig(s[1]),
            fmt_sig(s[2]),
            fmt_sig(s[3]),
            fmt_sig(s[4]),
            fmt_sig(s[5]),
            fmt_sig(r.input[0]),
            fmt_sig(r.input[1]),
            fmt_sig(r.cost),
            status_label(r.status).to_string(),
            gap.map(fmt_sig).unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Csv { path: path.to_path_buf(), source: e })?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| CliError::Csv { path: path.to_path_buf(), source: e })?
        .iter()
        .map(str::to_string)
        .collect();
    if header != COLUMNS {
        return Err(CliError::Trace { path: path.to_path_buf(), message: format!("unexpected header {header:?}") });
    }
    r.deserialize().collect::<Result<Vec<TraceRow>, _>>().map_err(|e| CliError::Csv { path: path.to_path_buf(), source: e })
}

/// Min-gap column recomputed from the positions in `rows`.
pub fn recompute_min_gaps(rows: &[TraceRow]) -> Vec<Option<f64>> {
    let pos: Vec<([f64; 2], usize)> = rows.iter().map(|r| ([r.xi_x, r.xi_y], r.step)).collect();
    min_gaps(&pos).into_iter().map(|g| g.map(rounded)).collect()
}

/// Largest excess over the state and input bounds per row.
pub fn bound_excess(rows: &[TraceRow], bounds: &Bounds) -> Vec<f64> {
    rows.iter()
        .map(|r| {
            let x = r.state();
            let u = [r.a, r.delta];
            let sx = (0..6).map(|i| (x[i] - bounds.state_upper[i]).max(bounds.state_lower[i] - x[i]));
            let su = (0..2).map(|i| (u[i] - bounds.input_upper[i]).max(bounds.input_lower[i] - u[i]));
            sx.chain(su).fold(0.0, f64::max)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(fmt_sig(683.25), "683.25");
        assert_eq!(fmt_sig(0.2), "0.2");
        assert_eq!(fmt_sig(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_sig(-1234.567891234), "-1234.56789");
        assert_eq!(fmt_sig(1.5e-9), "1.5e-9");
        assert_eq!(fmt_sig(123456789012.0), "1.23456789e11");
        assert_eq!(fmt_sig(0.0), "0");
        assert_eq!(fmt_sig(-0.0), "0");
        assert_eq!(fmt_sig(f64::INFINITY), "inf");
        assert_eq!(fmt_sig(99.99999999999), "100");
    }

    #[test]
    fn gaps_within_a_step() {
        let rows = vec![([0.0, 0.0], 0), ([3.0, 4.0], 0), ([100.0, 0.0], 1)];
        assert_eq!(min_gaps(&rows), vec![Some(5.0), Some(5.0), None]);
    }
}
