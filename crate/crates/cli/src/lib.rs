//! Scenario loading, runs, trace persistence and plots for the junction
//! simulator.

pub mod plot;
pub mod report;
pub mod scenario;
pub mod trace_io;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use junction_mpc::sim::{simulate, CheckMode, ScenarioConfig, SimError, Trace};
use thiserror::Error;

pub use report::RunReport;
pub use scenario::{load_scenario, parse_scenario, BUNDLED};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{origin}: {message}")]
    Parse { origin: String, message: String },
    #[error("invalid scenario:\n  - {}", .0.join("\n  - "))]
    Invalid(Vec<String>),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("malformed trace {path}: {message}")]
    Trace { path: PathBuf, message: String },
    #[error(transparent)]
    Sim(#[from] SimError),
}

impl CliError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }
}

/// Command-line overrides applied on top of a scenario file.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub horizon: Option<usize>,
    pub scan_all_windows: bool,
    pub plots: bool,
    pub checks: Option<CheckMode>,
}

pub const TRACE_FILE: &str = "trace.csv";
pub const REPORT_FILE: &str = "report.json";

pub fn apply_options(cfg: &mut ScenarioConfig, opts: &RunOptions) -> Result<(), CliError> {
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    if let Some(n) = opts.horizon {
        cfg.mpc.horizon = n;
    }
    if opts.scan_all_windows {
        cfg.scheduling.scan_all_windows = true;
    }
    if let Some(c) = opts.checks {
        cfg.checks = c;
    }
    let problems = cfg.problems();
    if problems.is_empty() {
        Ok(())
    } else {
        Err(CliError::Invalid(problems))
    }
}

/// Simulates and writes the trace, the plots and the report into `out_dir`.
pub fn run(mut cfg: ScenarioConfig, out_dir: &Path, opts: &RunOptions) -> Result<(RunReport, Trace), CliError> {
    apply_options(&mut cfg, opts)?;
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let started = Instant::now();
    let trace = simulate(cfg.clone())?;
    let wall = started.elapsed().as_secs_f64();

    let mut files = Vec::new();
    let trace_path = out_dir.join(TRACE_FILE);
    trace_io::write_trace(&trace, &trace_path)?;
    files.push(TRACE_FILE.to_string());
    if opts.plots {
        for p in plot::render_plots(&trace, &cfg, out_dir)? {
            files.push(p);
        }
    }
    files.push(REPORT_FILE.to_string());
    let report = RunReport::new(&cfg, &trace, wall, files);
    let report_path = out_dir.join(REPORT_FILE);
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&report_path, json + "\n").map_err(|e| CliError::io(&report_path, e))?;
    Ok((report, trace))
}
