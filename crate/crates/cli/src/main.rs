use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use junction_cli::{load_scenario, run, RunOptions};
use junction_mpc::sim::CheckMode;

#[derive(Parser)]
#[command(name = "junction-mpc", version, about = "Simulate MPC-coordinated vehicles approaching a signalized junction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Checks {
    Strict,
    Log,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario (bundled name or TOML path) and write trace, plots and report.
    Run {
        scenario: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Prediction horizon N.
        #[arg(long)]
        horizon: Option<usize>,
        /// Search every green window instead of stopping at the first feasible one.
        #[arg(long)]
        scan_all_windows: bool,
        #[arg(long)]
        no_plots: bool,
        #[arg(long, value_enum)]
        check_invariants: Option<Checks>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match cli.command {
        Command::Run { scenario, out, seed, horizon, scan_all_windows, no_plots, check_invariants } => {
            let cfg = match load_scenario(&scenario) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(1);
                }
            };
            let opts = RunOptions {
                seed,
                horizon,
                scan_all_windows,
                plots: !no_plots,
                checks: check_invariants.map(|c| match c {
                    Checks::Strict => CheckMode::Strict,
                    Checks::Log => CheckMode::Log,
                }),
            };
            match run(cfg, &out, &opts) {
                Ok((report, _)) => {
                    let c = &report.checks;
                    println!(
                        "{}: {} vehicles, {} rounds, mean solve {:.2} ms, {} gap / {} bound / {} stop-line violations",
                        report.scenario,
                        report.vehicles,
                        report.rounds,
                        report.timing.mean_solve_s * 1e3,
                        c.gap_violations,
                        c.bound_violations,
                        c.stop_line_violations
                    );
                    println!("wrote {} files to {}", report.files.len(), out.display());
                    if c.aborted {
                        if let Some(v) = &c.first_violation {
                            eprintln!("aborted on invariant violation: {v:?}");
                        }
                        return ExitCode::from(2);
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(1)
                }
            }
        }
    }
}
