//! On-disk experiment configuration: the JSON schema, parsing with
//! line/column diagnostics, and validated construction of the market model
//! plus solver and quadrature settings. Every numeric parameter is
//! revalidated through the library constructors, so a config that builds is
//! exactly as trustworthy as one assembled in code.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::copula::{Checkerboard, CopulaModel};
use crate::dist::MarginalModel;
use crate::error::{Error, Result};
use crate::market::{PremiumPrinciple, UtilityModel, VarianceLoading};
use crate::quad::QuadratureSpec;
use crate::solver::SolverConfig;
use crate::treaty::MarketModel;

/// Premium principle as written in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PrincipleConfig {
    ExpectedValue { loading: f64 },
    StdDev { loading: f64 },
    Variance { g: VarianceLoading },
}

impl PrincipleConfig {
    fn build(&self) -> Result<PremiumPrinciple> {
        match self {
            PrincipleConfig::ExpectedValue { loading } => {
                PremiumPrinciple::expected_value(*loading)
            }
            PrincipleConfig::StdDev { loading } => PremiumPrinciple::std_dev(*loading),
            PrincipleConfig::Variance { g } => PremiumPrinciple::variance(g.clone()),
        }
    }
}

/// Utility as written in config files. Only constant absolute risk aversion
/// is expressible in JSON; general concave utilities are a library-level
/// feature (they carry closures).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum UtilityConfig {
    Exponential { risk_aversion: f64 },
}

/// One insured risk: its claim distribution and the premium principle the
/// reinsurer prices it with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskConfig {
    pub marginal: MarginalModel,
    pub principle: PrincipleConfig,
}

impl RiskConfig {
    /// Rebuild through the validating constructor; deserialization alone
    /// checks only the shape, not the parameter ranges.
    fn build_marginal(&self) -> Result<MarginalModel> {
        match &self.marginal {
            MarginalModel::Exponential { rate } => MarginalModel::exponential(*rate),
            MarginalModel::Pareto { scale, shape } => MarginalModel::pareto(*scale, *shape),
            MarginalModel::Empirical { sample } => MarginalModel::empirical(sample.clone()),
        }
    }
}

/// A complete experiment: the market, optional solver/quadrature overrides
/// (missing keys take the library defaults), and an optional output
/// directory (the command line's `--out` wins over it).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub risks: Vec<RiskConfig>,
    pub copula: CopulaModel,
    pub utility: UtilityConfig,
    /// Aggregate premium income of the insurer.
    pub c: f64,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub quadrature: QuadratureSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outputs: Option<PathBuf>,
}

/// A validated experiment, ready to run.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub market: MarketModel,
    pub solver: SolverConfig,
    pub quadrature: QuadratureSpec,
    pub outputs: Option<PathBuf>,
}

fn keyed(key: &str, e: Error) -> Error {
    Error::Config(format!("{key}: {e}"))
}

fn rebuild_copula(c: &CopulaModel) -> Result<CopulaModel> {
    match c {
        CopulaModel::Independence => Ok(CopulaModel::Independence),
        CopulaModel::Frank { alpha } => CopulaModel::frank(*alpha),
        CopulaModel::Fgm { alpha } => CopulaModel::fgm(*alpha),
        CopulaModel::Checkerboard { grid } => Ok(CopulaModel::Checkerboard {
            grid: Checkerboard::new(grid.values().to_vec())?,
        }),
    }
}

impl ExperimentConfig {
    /// Validate every parameter and assemble the market model. Errors name
    /// the offending key, e.g. `risks[1].principle: ...`.
    pub fn build(&self) -> Result<Experiment> {
        if self.risks.is_empty() {
            return Err(Error::Config("risks: at least one risk is required".into()));
        }
        let mut marginals = Vec::with_capacity(self.risks.len());
        let mut principles = Vec::with_capacity(self.risks.len());
        for (i, r) in self.risks.iter().enumerate() {
            marginals.push(
                r.build_marginal()
                    .map_err(|e| keyed(&format!("risks[{i}].marginal"), e))?,
            );
            principles.push(
                r.principle
                    .build()
                    .map_err(|e| keyed(&format!("risks[{i}].principle"), e))?,
            );
        }
        let copula = rebuild_copula(&self.copula).map_err(|e| keyed("copula", e))?;
        let utility = match self.utility {
            UtilityConfig::Exponential { risk_aversion } => {
                UtilityModel::exponential(risk_aversion).map_err(|e| keyed("utility", e))?
            }
        };
        let market = MarketModel::new(marginals, copula, principles, utility, self.c)?;
        self.solver.validate().map_err(|e| keyed("solver", e))?;
        self.quadrature.validate().map_err(|e| keyed("quadrature", e))?;
        Ok(Experiment {
            market,
            solver: self.solver.clone(),
            quadrature: self.quadrature.clone(),
            outputs: self.outputs.clone(),
        })
    }
}

/// Parse an experiment config from JSON text. Parse errors carry the line
/// and column; `source` names the file in the message.
pub fn parse_experiment(text: &str, source: &str) -> Result<ExperimentConfig> {
    serde_json::from_str(text).map_err(|e| Error::Config(format!("{source}: {e}")))
}

/// Load and parse an experiment config file.
pub fn load_experiment(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_experiment(&text, &path.display().to_string())
}

/// One suite entry: a display/directory name and the config it runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteEntry {
    pub name: String,
    /// Config file path; relative paths resolve against the suite file.
    pub config: PathBuf,
}

/// A list of experiments run together and summarized in one table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub runs: Vec<SuiteEntry>,
}

/// Load a suite file: entry names must be nonempty, unique, and safe to use
/// as directory names; an empty run list is a config error. Relative entry
/// paths are resolved against the suite file's directory.
pub fn load_suite(path: &Path) -> Result<SuiteConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut suite: SuiteConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if suite.runs.is_empty() {
        return Err(Error::Config(format!("{}: runs: the suite lists no runs", path.display())));
    }
    for (i, entry) in suite.runs.iter().enumerate() {
        let ok_name = !entry.name.is_empty()
            && entry
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
        if !ok_name {
            return Err(Error::Config(format!(
                "runs[{i}].name: {:?} is not a safe directory name (use [A-Za-z0-9_-])",
                entry.name
            )));
        }
        if suite.runs[..i].iter().any(|prev| prev.name == entry.name) {
            return Err(Error::Config(format!(
                "runs[{i}].name: duplicate name {:?}; output directories would collide",
                entry.name
            )));
        }
    }
    if let Some(parent) = path.parent() {
        for entry in &mut suite.runs {
            if entry.config.is_relative() {
                entry.config = parent.join(&entry.config);
            }
        }
    }
    Ok(suite)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_config() -> String {
        r#"{
            "risks": [
                {"marginal": {"kind": "exponential", "rate": 1.0},
                 "principle": {"kind": "expected_value", "loading": 0.3}},
                {"marginal": {"kind": "pareto", "scale": 4.0, "shape": 5.0},
                 "principle": {"kind": "expected_value", "loading": 0.5}}
            ],
            "copula": {"kind": "frank", "alpha": 10.0},
            "utility": {"kind": "exponential", "risk_aversion": 1.0},
            "c": 4.0
        }"#
        .to_string()
    }

    #[test]
    fn a_complete_config_builds_the_market() {
        let cfg = parse_experiment(&base_config(), "test").unwrap();
        let exp = cfg.build().unwrap();
        assert_eq!(exp.market.n(), 2);
        assert_eq!(exp.solver, SolverConfig::default());
        assert_eq!(exp.quadrature, QuadratureSpec::default());
        assert!(exp.outputs.is_none());
        assert_eq!(exp.market.utility.constant_risk_aversion(), Some(1.0));
    }

    #[test]
    fn negative_loading_is_rejected_with_the_key_path() {
        let text = base_config().replace("\"loading\": 0.5", "\"loading\": -0.5");
        let cfg = parse_experiment(&text, "test").unwrap();
        let err = cfg.build().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("risks[1].principle"), "got: {msg}");
    }

    #[test]
    fn unknown_keys_are_parse_errors_with_position() {
        let text = base_config().replace("\"c\": 4.0", "\"c\": 4.0, \"risk_aversion\": 2.0");
        let err = parse_experiment(&text, "bad.json").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bad.json"), "got: {msg}");
        assert!(msg.contains("line"), "got: {msg}");
        // typo'd solver keys are caught too, not silently ignored
        let text = base_config().replace(
            "\"c\": 4.0",
            "\"c\": 4.0, \"solver\": {\"outer_toll\": 1e-9}",
        );
        assert!(parse_experiment(&text, "bad.json").is_err());
    }

    #[test]
    fn missing_required_keys_are_parse_errors() {
        let text = base_config().replace("\"c\": 4.0", "\"c_total\": 4.0");
        assert!(parse_experiment(&text, "test").is_err());
    }

    #[test]
    fn partial_solver_overrides_keep_other_defaults() {
        let text = base_config().replace(
            "\"c\": 4.0",
            "\"c\": 4.0, \"solver\": {\"treaty_knots\": 101}, \"quadrature\": {\"mesh_points\": 64}",
        );
        let cfg = parse_experiment(&text, "test").unwrap();
        let exp = cfg.build().unwrap();
        assert_eq!(exp.solver.treaty_knots, 101);
        assert_eq!(exp.solver.outer_tol, SolverConfig::default().outer_tol);
        assert_eq!(exp.quadrature.mesh_points, 64);
        assert_eq!(exp.quadrature.rng_seed, QuadratureSpec::default().rng_seed);
    }

    #[test]
    fn invalid_checkerboard_names_the_failing_cell() {
        // grounded, uniform margins, values in [0, 1], but the rectangle
        // [0, 0.5] x [0.5, 1] carries mass 0.5 - 0.6 < 0
        let text = base_config().replace(
            r#""copula": {"kind": "frank", "alpha": 10.0}"#,
            r#""copula": {"kind": "checkerboard", "grid": [
                [0.0, 0.0, 0.0],
                [0.0, 0.6, 0.5],
                [0.0, 0.5, 1.0]
            ]}"#,
        );
        let cfg = parse_experiment(&text, "test").unwrap();
        let err = cfg.build().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("cell (0, 1)"), "got: {msg}");
    }

    #[test]
    fn nonpositive_risk_aversion_is_rejected() {
        let text = base_config().replace("\"risk_aversion\": 1.0", "\"risk_aversion\": 0.0");
        let cfg = parse_experiment(&text, "test").unwrap();
        let msg = cfg.build().unwrap_err().to_string();
        assert!(msg.contains("utility"), "got: {msg}");
    }

    #[test]
    fn infinite_premium_income_is_rejected() {
        let mut cfg = parse_experiment(&base_config(), "test").unwrap();
        cfg.c = f64::INFINITY;
        assert!(cfg.build().is_err());
    }

    #[test]
    fn empty_risk_list_is_rejected() {
        let mut cfg = parse_experiment(&base_config(), "test").unwrap();
        cfg.risks.clear();
        let msg = cfg.build().unwrap_err().to_string();
        assert!(msg.contains("risks"), "got: {msg}");
    }

    #[test]
    fn configs_round_trip_through_json() {
        let cfg = parse_experiment(&base_config(), "test").unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back = parse_experiment(&text, "roundtrip").unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn suites_reject_empty_duplicate_and_unsafe_names() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("suite.json");
        std::fs::write(&p, r#"{"runs": []}"#).unwrap();
        assert!(load_suite(&p).is_err());
        std::fs::write(
            &p,
            r#"{"runs": [{"name": "a", "config": "x.json"}, {"name": "a", "config": "y.json"}]}"#,
        )
        .unwrap();
        let msg = load_suite(&p).unwrap_err().to_string();
        assert!(msg.contains("duplicate"), "got: {msg}");
        std::fs::write(&p, r#"{"runs": [{"name": "a/../b", "config": "x.json"}]}"#).unwrap();
        assert!(load_suite(&p).is_err());
    }

    #[test]
    fn suite_entry_paths_resolve_against_the_suite_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("suite.json");
        std::fs::write(&p, r#"{"runs": [{"name": "a", "config": "configs/x.json"}]}"#).unwrap();
        let suite = load_suite(&p).unwrap();
        assert_eq!(suite.runs[0].config, dir.path().join("configs/x.json"));
    }
}
