//! Command-line front end: `run` solves one experiment config, `suite` runs
//! a list of them with a summary table, `verify` re-checks stored treaty
//! CSVs. Exit codes: 0 success, 2 solver failure (or a failed verify),
//! 3 config error; a suite exits with its worst entry.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use retrocede::config;
use retrocede::runner::{self, RunOptions};

#[derive(Parser)]
#[command(
    name = "retrocede",
    version,
    about = "Optimal per-risk reinsurance treaties for dependent risks under concave utility"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one experiment config and write treaty CSVs, residual CSVs,
    /// report.json, and SVG figures.
    Run {
        /// Experiment config (JSON).
        config: PathBuf,
        /// Output directory; overrides the config's `outputs` (default "out").
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also solve under independence into independence/ and emit
        /// delta_<i>.csv ceded-curve differences.
        #[arg(long)]
        compare_independence: bool,
        /// Re-run at other risk aversions, e.g. --scan R=0.5,1,2; the shipped
        /// default R=1 is a repo choice, not a calibrated value.
        #[arg(long, value_name = "R=V1,V2,...")]
        scan: Option<String>,
        /// Also solve from the stop-loss-at-median start and report the
        /// utility and curve gaps against the full-cession start.
        #[arg(long)]
        init_sensitivity: bool,
    },
    /// Run every entry of a suite file into <out>/<name>/ and aggregate a
    /// summary table. RETROCEDE_WORKERS sets the parallel worker count.
    Suite {
        /// Suite file (JSON): {"runs": [{"name": ..., "config": ...}, ...]}.
        suite: PathBuf,
        /// Output root (default "suite_out").
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recheck stored treaty_<i>.csv files against a config's optimality
    /// conditions; exits 0 only if the residuals pass at 1e-4 * m0.
    Verify {
        /// Experiment config (JSON) describing the market.
        config: PathBuf,
        /// Directory holding treaty_<i>.csv.
        treaty_dir: PathBuf,
    },
}

fn parse_scan(text: &str) -> Result<Vec<f64>, String> {
    let rest = text
        .strip_prefix("R=")
        .ok_or_else(|| format!("--scan expects R=v1,v2,..., got {text:?}"))?;
    let values: Result<Vec<f64>, String> = rest
        .split(',')
        .map(|t| {
            let v: f64 = t
                .trim()
                .parse()
                .map_err(|_| format!("--scan: {t:?} is not a number"))?;
            if v > 0.0 && v.is_finite() {
                Ok(v)
            } else {
                Err(format!("--scan: risk aversion must be positive and finite, got {t:?}"))
            }
        })
        .collect();
    let values = values?;
    if values.is_empty() {
        return Err("--scan lists no values".into());
    }
    Ok(values)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code: i32 = match cli.command {
        Command::Run { config, out, compare_independence, scan, init_sensitivity } => {
            let scan = match scan.as_deref().map(parse_scan).transpose() {
                Ok(s) => s.unwrap_or_default(),
                Err(msg) => {
                    eprintln!("error: {msg}");
                    return ExitCode::from(3);
                }
            };
            let opts = RunOptions { out_dir: out, compare_independence, scan, init_sensitivity };
            match config::load_experiment(&config)
                .and_then(|cfg| runner::run_experiment(&cfg, &opts))
            {
                Ok(report) => {
                    println!(
                        "converged in {} cycles: expected utility {:.12e}, max residual {:.3e} (m0 {:.6e})",
                        report.timing.outer_cycles,
                        report.final_expected_utility,
                        report.residuals.max_violation,
                        report.residuals.m0
                    );
                    0
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    runner::exit_code(&e)
                }
            }
        }
        Command::Suite { suite, out } => {
            let workers =
                runner::env_worker_count(std::env::var("RETROCEDE_WORKERS").ok().as_deref());
            let out_root = out.unwrap_or_else(|| PathBuf::from("suite_out"));
            match config::load_suite(&suite)
                .and_then(|s| runner::run_suite(&s, Path::new(&out_root), workers))
            {
                Ok(summary) => summary.exit_code,
                Err(e) => {
                    eprintln!("error: {e}");
                    runner::exit_code(&e)
                }
            }
        }
        Command::Verify { config, treaty_dir } => {
            match config::load_experiment(&config)
                .and_then(|cfg| runner::verify_stored(&cfg, &treaty_dir))
            {
                Ok(v) if v.passed => {
                    println!(
                        "PASS: max violation {:.3e} within 1e-4 * m0 (m0 = {:.6e})",
                        v.max_violation, v.m0
                    );
                    0
                }
                Ok(v) => {
                    println!(
                        "FAIL: max violation {:.3e} exceeds 1e-4 * m0 (m0 = {:.6e})",
                        v.max_violation, v.m0
                    );
                    2
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    runner::exit_code(&e)
                }
            }
        }
    };
    ExitCode::from(code.clamp(0, 255) as u8)
}
