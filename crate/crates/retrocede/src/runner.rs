//! Experiment runner: build the market from a config, optimize, and write
//! the run artifacts (treaty CSVs, residual CSVs, a JSON report, SVG
//! figures). Identical config and seed produce byte-identical artifacts, so
//! everything time- or machine-dependent stays out of the files: wall-clock
//! goes to stderr, and the report's "timing" section holds deterministic
//! effort counters instead.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::config::{self, ExperimentConfig, SuiteConfig, SuiteEntry};
use crate::copula::CopulaModel;
use crate::error::{Error, Result};
use crate::plot::{line_chart, Series};
use crate::quad::QuadratureSpec;
use crate::solver::{optimize, InitTreaty, SolverConfig};
use crate::treaty::{self, MarketModel, Strategy, TreatyCurve};
use crate::verify::{optimality_residual, ConditionSide, ResidualReport, RiskResiduals};

/// Command-line options of a single run.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Overrides the config's `outputs` directory; default "out".
    pub out_dir: Option<PathBuf>,
    /// Also solve under independence and emit ceded-curve deltas.
    pub compare_independence: bool,
    /// Risk-aversion values to re-run in `scan_R_<value>/` subdirectories.
    pub scan: Vec<f64>,
    /// Also solve from the stop-loss-at-median start and report the gap.
    pub init_sensitivity: bool,
}

/// Violation summary of one risk, pointing at the worst grid point; the full
/// rows live in `residuals_<i>.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskResidualSummary {
    pub risk: usize,
    pub max_violation: f64,
    pub worst_x: f64,
    pub rows: usize,
}

/// Residual section of the run report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSummary {
    /// Expected marginal utility of net profit, the violations' scale.
    pub m0: f64,
    pub max_violation: f64,
    /// max_violation / m0, the scale-free number thresholds apply to.
    pub relative_violation: f64,
    pub risks: Vec<RiskResidualSummary>,
}

/// Deterministic effort counters standing in for timing in the artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffortMetrics {
    pub outer_cycles: usize,
    pub total_newton_iterations: usize,
    pub final_barrier_eps: f64,
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub converged: bool,
    /// RNG seed the quadrature spec carries (Monte Carlo paths only).
    pub seed: u64,
    /// Constant absolute risk aversion when the utility has one.
    pub risk_aversion: Option<f64>,
    pub aggregate_premium_income: f64,
    pub initial_expected_utility: f64,
    pub final_expected_utility: f64,
    pub per_cycle_expected_utility: Vec<f64>,
    pub premiums: Vec<f64>,
    pub moments: Vec<Vec<f64>>,
    pub residuals: ResidualSummary,
    pub timing: EffortMetrics,
}

/// Comparison of the two solver starts written by `--init-sensitivity`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitSensitivity {
    pub utility_full_init: f64,
    pub utility_stop_loss_median_init: f64,
    pub utility_gap: f64,
    /// Sup-distance between the two converged ceded curves, per risk.
    pub ceded_sup_gap: Vec<f64>,
    pub max_ceded_sup_gap: f64,
}

/// One suite entry's outcome in the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteEntryResult {
    pub name: String,
    pub exit_code: i32,
    pub converged: bool,
    pub final_expected_utility: Option<f64>,
    pub relative_residual: Option<f64>,
    pub message: Option<String>,
}

/// Aggregated suite outcome; `exit_code` is the worst entry code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub results: Vec<SuiteEntryResult>,
    pub exit_code: i32,
}

/// Process exit status for a failed run: config errors exit 3, failures
/// after a valid config (stalls, divergence, write errors) exit 2.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 3,
        _ => 2,
    }
}

/// Worker count for suite execution: parse of the RETROCEDE_WORKERS value,
/// defaulting to 1 (sequential) and clamped to [1, 64].
pub fn env_worker_count(value: Option<&str>) -> usize {
    value
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(1)
        .clamp(1, 64)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    text.push('\n');
    write_text(path, &text)
}

fn side_name(side: ConditionSide) -> &'static str {
    match side {
        ConditionSide::AtZero => "at_zero",
        ConditionSide::Interior => "interior",
        ConditionSide::AtClaim => "at_claim",
    }
}

/// Grid a treaty is tabulated on: its own knots if piecewise linear, else
/// the solver's knot layout for the risk.
fn curve_grid(t: &TreatyCurve, m: &crate::dist::MarginalModel, cfg: &SolverConfig) -> Result<Vec<f64>> {
    match t {
        TreatyCurve::PiecewiseLinear { x, .. } => Ok(x.clone()),
        _ => treaty::knot_grid(m, cfg.treaty_knots, cfg.treaty_top_prob),
    }
}

fn treaty_csv(rows: &[(f64, f64, f64)]) -> String {
    let mut out = String::from("x,ceded,retained\n");
    for &(x, z, r) in rows {
        out.push_str(&format!("{x},{z},{r}\n"));
    }
    out
}

fn residual_csv(rr: &RiskResiduals) -> String {
    let mut out = String::from("x,ceded,side,lhs,rhs,violation\n");
    for row in &rr.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.x,
            row.ceded,
            side_name(row.side),
            row.lhs,
            row.rhs,
            row.violation
        ));
    }
    out
}

fn residual_summary(rep: &ResidualReport) -> ResidualSummary {
    ResidualSummary {
        m0: rep.m0,
        max_violation: rep.max_violation,
        relative_violation: rep.max_violation / rep.m0.abs().max(f64::MIN_POSITIVE),
        risks: rep
            .risks
            .iter()
            .map(|r| RiskResidualSummary {
                risk: r.risk,
                max_violation: r.max_violation,
                worst_x: r
                    .rows
                    .iter()
                    .max_by(|a, b| a.violation.total_cmp(&b.violation))
                    .map(|row| row.x)
                    .unwrap_or(0.0),
                rows: r.rows.len(),
            })
            .collect(),
    }
}

/// A completed single-market solve plus its tabulated curves.
struct RunOutcome {
    strategy: Strategy,
    report: RunReport,
    sampled: Vec<Vec<(f64, f64, f64)>>,
}

/// Solve one market and write the core artifacts (treaty and residual CSVs,
/// report.json, figures) into `dir`.
fn run_market(
    mm: &MarketModel,
    cfg: &SolverConfig,
    spec: &QuadratureSpec,
    dir: &Path,
) -> Result<RunOutcome> {
    let started = std::time::Instant::now();
    fs::create_dir_all(dir)?;
    let (strategy, solve) = optimize(mm, cfg, spec)?;
    let residual = optimality_residual(mm, &strategy, spec)?;
    let report = RunReport {
        converged: solve.converged,
        seed: spec.rng_seed,
        risk_aversion: mm.utility.constant_risk_aversion(),
        aggregate_premium_income: mm.c,
        initial_expected_utility: solve.initial_expected_utility,
        final_expected_utility: solve.final_expected_utility,
        per_cycle_expected_utility: solve.cycles.iter().map(|c| c.expected_utility).collect(),
        premiums: solve.final_premiums.clone(),
        moments: solve.final_moments.clone(),
        residuals: residual_summary(&residual),
        timing: EffortMetrics {
            outer_cycles: solve.cycles_used,
            total_newton_iterations: solve.total_newton_iterations,
            final_barrier_eps: solve.eps_final,
        },
    };
    let mut sampled = Vec::with_capacity(mm.n());
    for i in 0..mm.n() {
        let grid = curve_grid(&strategy.treaties[i], &mm.marginals[i], cfg)?;
        let rows = treaty::sample_curve(&strategy.treaties[i], &grid);
        write_text(&dir.join(format!("treaty_{i}.csv")), &treaty_csv(&rows))?;
        let chart = line_chart(
            &format!("risk {i} treaty"),
            "claim size x",
            "amount",
            &[
                Series { label: "ceded".into(), points: rows.iter().map(|r| (r.0, r.1)).collect() },
                Series {
                    label: "retained".into(),
                    points: rows.iter().map(|r| (r.0, r.2)).collect(),
                },
            ],
        );
        write_text(&dir.join(format!("treaty_{i}.svg")), &chart)?;
        write_text(&dir.join(format!("residuals_{i}.csv")), &residual_csv(&residual.risks[i]))?;
        sampled.push(rows);
    }
    write_json(&dir.join("report.json"), &report)?;
    let convergence = line_chart(
        "expected utility by cycle",
        "cycle",
        "expected utility",
        &[Series {
            label: "expected utility".into(),
            points: report
                .per_cycle_expected_utility
                .iter()
                .enumerate()
                .map(|(k, &u)| ((k + 1) as f64, u))
                .collect(),
        }],
    );
    write_text(&dir.join("convergence.svg"), &convergence)?;
    eprintln!(
        "[retrocede] {} solved in {:.2}s ({} cycles)",
        dir.display(),
        started.elapsed().as_secs_f64(),
        report.timing.outer_cycles
    );
    Ok(RunOutcome { strategy, report, sampled })
}

/// Merge two tabulation grids into one sorted deduplicated grid.
fn union_grid(a: &[(f64, f64, f64)], b: &[(f64, f64, f64)]) -> Vec<f64> {
    let mut g: Vec<f64> = a.iter().map(|r| r.0).chain(b.iter().map(|r| r.0)).collect();
    g.sort_by(|p, q| p.total_cmp(q));
    g.dedup();
    g
}

/// Ceded-curve differences against the independence solve: `delta_<i>.csv`
/// with the two curves evaluated on the union of their grids.
fn write_deltas(dir: &Path, main_run: &RunOutcome, indep: &RunOutcome) -> Result<()> {
    for i in 0..main_run.strategy.treaties.len() {
        let grid = union_grid(&main_run.sampled[i], &indep.sampled[i]);
        let mut csv = String::from("x,ceded,ceded_independence,delta\n");
        let mut dep_pts = Vec::with_capacity(grid.len());
        let mut ind_pts = Vec::with_capacity(grid.len());
        for &x in &grid {
            let zd = main_run.strategy.treaties[i].eval(x);
            let zi = indep.strategy.treaties[i].eval(x);
            csv.push_str(&format!("{x},{zd},{zi},{}\n", zd - zi));
            dep_pts.push((x, zd));
            ind_pts.push((x, zi));
        }
        write_text(&dir.join(format!("delta_{i}.csv")), &csv)?;
        let chart = line_chart(
            &format!("risk {i} ceded vs independence"),
            "claim size x",
            "ceded amount",
            &[
                Series { label: "ceded".into(), points: dep_pts },
                Series { label: "ceded under independence".into(), points: ind_pts },
            ],
        );
        write_text(&dir.join(format!("delta_{i}.svg")), &chart)?;
    }
    Ok(())
}

/// Sup-distance between two strategies' ceded curves per risk, measured on
/// the union of their tabulation grids.
fn ceded_sup_gaps(a: &RunOutcome, b: &RunOutcome) -> Vec<f64> {
    (0..a.strategy.treaties.len())
        .map(|i| {
            union_grid(&a.sampled[i], &b.sampled[i])
                .iter()
                .map(|&x| (a.strategy.treaties[i].eval(x) - b.strategy.treaties[i].eval(x)).abs())
                .fold(0.0, f64::max)
        })
        .collect()
}

/// Same market with the copula replaced by independence.
fn independence_market(mm: &MarketModel) -> Result<MarketModel> {
    MarketModel::new(
        mm.marginals.clone(),
        CopulaModel::Independence,
        mm.principles.clone(),
        mm.utility.clone(),
        mm.c,
    )
}

/// Same market with a different constant risk aversion.
fn market_with_risk_aversion(mm: &MarketModel, r: f64) -> Result<MarketModel> {
    MarketModel::new(
        mm.marginals.clone(),
        mm.copula.clone(),
        mm.principles.clone(),
        crate::market::UtilityModel::exponential(r)?,
        mm.c,
    )
}

/// Run one experiment end to end: the main solve plus whatever the flags ask
/// for (independence comparison, risk-aversion scan, start sensitivity).
/// Returns the main solve's report; artifacts land under the output
/// directory (`--out` wins over the config's `outputs`, default "out").
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunReport> {
    let exp = cfg.build()?;
    let out = opts
        .out_dir
        .clone()
        .or_else(|| exp.outputs.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let main_run = run_market(&exp.market, &exp.solver, &exp.quadrature, &out)?;

    if opts.compare_independence {
        let indep_mm = independence_market(&exp.market)?;
        let indep = run_market(&indep_mm, &exp.solver, &exp.quadrature, &out.join("independence"))?;
        write_deltas(&out, &main_run, &indep)?;
    }

    if !opts.scan.is_empty() {
        let mut csv = String::from("R,converged,final_expected_utility,total_premium\n");
        for &r in &opts.scan {
            let mm = market_with_risk_aversion(&exp.market, r)
                .map_err(|e| Error::Config(format!("--scan R={r}: {e}")))?;
            let sub = run_market(&mm, &exp.solver, &exp.quadrature, &out.join(format!("scan_R_{r}")))?;
            csv.push_str(&format!(
                "{r},{},{},{}\n",
                sub.report.converged,
                sub.report.final_expected_utility,
                sub.report.premiums.iter().sum::<f64>()
            ));
        }
        write_text(&out.join("scan_summary.csv"), &csv)?;
    }

    if opts.init_sensitivity {
        let alt_cfg = SolverConfig { init: InitTreaty::StopLossMedian, ..exp.solver.clone() };
        let alt = run_market(&exp.market, &alt_cfg, &exp.quadrature, &out.join("init_stop_loss_median"))?;
        let gaps = ceded_sup_gaps(&main_run, &alt);
        let sensitivity = InitSensitivity {
            utility_full_init: main_run.report.final_expected_utility,
            utility_stop_loss_median_init: alt.report.final_expected_utility,
            utility_gap: (main_run.report.final_expected_utility
                - alt.report.final_expected_utility)
                .abs(),
            max_ceded_sup_gap: gaps.iter().fold(0.0, |a, &b| f64::max(a, b)),
            ceded_sup_gap: gaps,
        };
        write_json(&out.join("init_sensitivity.json"), &sensitivity)?;
    }
    Ok(main_run.report)
}

fn run_suite_entry(entry: &SuiteEntry, out_root: &Path) -> SuiteEntryResult {
    let outcome = config::load_experiment(&entry.config).and_then(|cfg| {
        run_experiment(
            &cfg,
            &RunOptions { out_dir: Some(out_root.join(&entry.name)), ..RunOptions::default() },
        )
    });
    match outcome {
        Ok(report) => SuiteEntryResult {
            name: entry.name.clone(),
            exit_code: 0,
            converged: report.converged,
            final_expected_utility: Some(report.final_expected_utility),
            relative_residual: Some(report.residuals.relative_violation),
            message: None,
        },
        Err(e) => SuiteEntryResult {
            name: entry.name.clone(),
            exit_code: exit_code(&e),
            converged: false,
            final_expected_utility: None,
            relative_residual: None,
            message: Some(e.to_string()),
        },
    }
}

/// Run every suite entry into `<out_root>/<name>/`, write
/// `suite_summary.json`, print the summary table, and return the summary
/// with the worst entry exit code. `workers` > 1 runs entries concurrently;
/// results and artifacts are identical either way.
pub fn run_suite(suite: &SuiteConfig, out_root: &Path, workers: usize) -> Result<SuiteSummary> {
    fs::create_dir_all(out_root)?;
    let n = suite.runs.len();
    let slots: Mutex<Vec<Option<SuiteEntryResult>>> = Mutex::new(vec![None; n]);
    let next = AtomicUsize::new(0);
    let workers = workers.clamp(1, n.max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let result = run_suite_entry(&suite.runs[i], out_root);
                slots.lock().expect("no panics hold this lock")[i] = Some(result);
            });
        }
    });
    let results: Vec<SuiteEntryResult> = slots
        .into_inner()
        .expect("worker threads joined")
        .into_iter()
        .map(|r| r.expect("every entry ran"))
        .collect();
    let exit_code = results.iter().map(|r| r.exit_code).max().unwrap_or(0);
    let summary = SuiteSummary { results, exit_code };
    write_json(&out_root.join("suite_summary.json"), &summary)?;
    println!("{:<28} {:>4}  {:>24}  {:>14}", "name", "exit", "expected utility", "residual/m0");
    for r in &summary.results {
        match (r.final_expected_utility, r.relative_residual) {
            (Some(u), Some(v)) => {
                println!("{:<28} {:>4}  {:>24.16e}  {:>14.3e}", r.name, r.exit_code, u, v)
            }
            _ => println!(
                "{:<28} {:>4}  {}",
                r.name,
                r.exit_code,
                r.message.as_deref().unwrap_or("failed")
            ),
        }
    }
    Ok(summary)
}

fn read_treaty_csv(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    match lines.next() {
        Some("x,ceded,retained") => {}
        other => {
            return Err(Error::Config(format!(
                "{}: expected header x,ceded,retained, got {other:?}",
                path.display()
            )))
        }
    }
    let mut xs = Vec::new();
    let mut zs = Vec::new();
    for (k, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let bad = || Error::Config(format!("{}: line {}: malformed row", path.display(), k + 2));
        let x: f64 = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let z: f64 = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        xs.push(x);
        zs.push(z);
    }
    Ok((xs, zs))
}

/// Outcome of re-checking stored treaties: the full residual report and
/// whether it clears the acceptance threshold of 1e-4 relative to m0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyOutcome {
    pub passed: bool,
    pub max_violation: f64,
    pub m0: f64,
    pub report: ResidualReport,
}

/// Re-run the optimality check on stored treaty CSVs: rebuild the curves,
/// reprice them under the config's market, and evaluate the residuals. A
/// `verify_report.json` is written next to the treaties.
pub fn verify_stored(cfg: &ExperimentConfig, treaty_dir: &Path) -> Result<VerifyOutcome> {
    let exp = cfg.build()?;
    let mut treaties = Vec::with_capacity(exp.market.n());
    for i in 0..exp.market.n() {
        let (x, z) = read_treaty_csv(&treaty_dir.join(format!("treaty_{i}.csv")))?;
        treaties.push(TreatyCurve::piecewise_linear(x, z)?);
    }
    let strategy = Strategy::priced(treaties, &exp.market, &exp.quadrature)?;
    let report = optimality_residual(&exp.market, &strategy, &exp.quadrature)?;
    let outcome = VerifyOutcome {
        passed: report.max_violation <= 1e-4 * report.m0.abs(),
        max_violation: report.max_violation,
        m0: report.m0,
        report,
    };
    write_json(&treaty_dir.join("verify_report.json"), &outcome)?;
    Ok(outcome)
}
