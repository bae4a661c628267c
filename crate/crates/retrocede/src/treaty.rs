//! Treaty curves (ceded-amount functions), their moments, and portfolio-level
//! quantities: net profit and expected utility of a full strategy.

use serde::{Deserialize, Serialize};

use crate::copula::CopulaModel;
use crate::dist::MarginalModel;
use crate::error::{Error, Result};
use crate::market::{validate_moment_vector, PremiumPrinciple, UtilityModel};
use crate::quad::{self, QuadratureSpec};

/// Ceded amount as a function of the claim: parametric shortcuts plus a
/// piecewise-linear curve on an explicit grid. Every form satisfies
/// 0 <= Z(x) <= x.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TreatyCurve {
    /// Cede nothing.
    Null,
    /// Cede everything.
    Full,
    /// Cede the excess over a retention: Z(x) = max(0, x - retention).
    StopLoss { retention: f64 },
    /// Cede a fixed fraction: Z(x) = fraction * x.
    QuotaShare { fraction: f64 },
    /// Linear interpolation through (x_j, z_j); beyond the last knot the
    /// last segment's slope, clamped to [0, 1], continues.
    PiecewiseLinear { x: Vec<f64>, z: Vec<f64> },
}

impl TreatyCurve {
    pub fn stop_loss(retention: f64) -> Result<Self> {
        if !(retention >= 0.0 && retention.is_finite()) {
            return Err(Error::Config(format!(
                "stop-loss retention must be a finite nonnegative number, got {retention}"
            )));
        }
        Ok(TreatyCurve::StopLoss { retention })
    }

    pub fn quota_share(fraction: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::Config(format!(
                "quota share fraction must lie in [0, 1], got {fraction}"
            )));
        }
        Ok(TreatyCurve::QuotaShare { fraction })
    }

    /// Strictly increasing grid starting at 0, knot values within [0, x_j].
    pub fn piecewise_linear(x: Vec<f64>, z: Vec<f64>) -> Result<Self> {
        if x.len() != z.len() || x.len() < 2 {
            return Err(Error::Config(format!(
                "piecewise treaty needs matching grids of at least 2 knots, got {} and {}",
                x.len(),
                z.len()
            )));
        }
        if x[0] != 0.0 {
            return Err(Error::Config(format!(
                "treaty grid must start at 0, got {}",
                x[0]
            )));
        }
        for j in 0..x.len() {
            if !x[j].is_finite() || !z[j].is_finite() {
                return Err(Error::Config("treaty knots must be finite".into()));
            }
            if j > 0 && x[j] <= x[j - 1] {
                return Err(Error::Config(format!(
                    "treaty grid must be strictly increasing, knot {j} has {} after {}",
                    x[j],
                    x[j - 1]
                )));
            }
            if z[j] < 0.0 || z[j] > x[j] {
                return Err(Error::Config(format!(
                    "ceded value {} at claim {} leaves [0, x]",
                    z[j], x[j]
                )));
            }
        }
        Ok(TreatyCurve::PiecewiseLinear { x, z })
    }

    /// Piecewise-linear curve from sampled values, clamping each value into
    /// [0, x_j] first (absorbs fixed-point round-off).
    pub fn from_samples(x: Vec<f64>, z: Vec<f64>) -> Result<Self> {
        let clamped = x
            .iter()
            .zip(&z)
            .map(|(&xj, &zj)| zj.clamp(0.0, xj))
            .collect();
        TreatyCurve::piecewise_linear(x, clamped)
    }

    /// Ceded amount at claim x. Linear between knots; beyond the last knot
    /// the final slope continues, clamped to [0, 1] so 0 <= Z <= x holds on
    /// the whole half-line. A near-unit final slope (>= 0.99) extrapolates
    /// as exactly one: sampled curves that cede the whole excess layer keep
    /// a round-off slope deficit, and over a heavy tail that deficit would
    /// compound into unbounded retained claims.
    pub fn eval(&self, x: f64) -> f64 {
        let v = match self {
            TreatyCurve::Null => 0.0,
            TreatyCurve::Full => x,
            TreatyCurve::StopLoss { retention } => (x - retention).max(0.0),
            TreatyCurve::QuotaShare { fraction } => fraction * x,
            TreatyCurve::PiecewiseLinear { x: g, z } => {
                let n = g.len();
                if x >= g[n - 1] {
                    let mut slope = ((z[n - 1] - z[n - 2]) / (g[n - 1] - g[n - 2])).clamp(0.0, 1.0);
                    if slope >= 0.99 {
                        slope = 1.0;
                    }
                    z[n - 1] + slope * (x - g[n - 1])
                } else {
                    let j = match g.partition_point(|&gx| gx <= x) {
                        0 => 1,
                        p => p,
                    };
                    let t = (x - g[j - 1]) / (g[j] - g[j - 1]);
                    z[j - 1] + t * (z[j] - z[j - 1])
                }
            }
        };
        v.clamp(0.0, x.max(0.0))
    }

    /// Claim values where the ceded curve has kinks (quadrature panel edges).
    pub fn breakpoints(&self) -> Vec<f64> {
        match self {
            TreatyCurve::StopLoss { retention } => vec![*retention],
            TreatyCurve::PiecewiseLinear { x, .. } => x[1..].to_vec(),
            _ => Vec::new(),
        }
    }

    /// E Z(X)^r for r = 1..=k. Full returns the marginal's raw moments; the
    /// rest integrate (kinks pinned to panel edges).
    pub fn moments(&self, m: &MarginalModel, k: u32, spec: &QuadratureSpec) -> Result<Vec<f64>> {
        match self {
            TreatyCurve::Null => Ok(vec![0.0; k as usize]),
            TreatyCurve::Full => (1..=k).map(|r| m.raw_moment(r)).collect(),
            _ => {
                let bp = self.breakpoints();
                (1..=k)
                    .map(|r| {
                        quad::integrate_marginal_kinked(
                            |x| self.eval(x).powi(r as i32),
                            m,
                            spec,
                            &bp,
                        )
                    })
                    .collect()
            }
        }
    }
}

/// One treaty per risk plus the premium each one costs. The cache lets
/// expected-utility comparisons hold premiums fixed while curves vary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Strategy {
    pub treaties: Vec<TreatyCurve>,
    pub premiums: Vec<f64>,
}

impl Strategy {
    /// Price each treaty under the market's principles.
    pub fn priced(treaties: Vec<TreatyCurve>, mm: &MarketModel, spec: &QuadratureSpec) -> Result<Self> {
        if treaties.len() != mm.n() {
            return Err(Error::Config(format!(
                "{} treaties for {} risks",
                treaties.len(),
                mm.n()
            )));
        }
        let mut premiums = Vec::with_capacity(treaties.len());
        for (i, t) in treaties.iter().enumerate() {
            let order = mm.principles[i].order() as u32;
            let m = t.moments(&mm.marginals[i], order, spec)?;
            premiums.push(mm.principles[i].premium(&m)?);
        }
        Ok(Strategy { treaties, premiums })
    }

    /// Trusted constructor with premiums supplied by the caller.
    pub fn with_premiums(treaties: Vec<TreatyCurve>, premiums: Vec<f64>) -> Self {
        Strategy { treaties, premiums }
    }

    /// Recompute premiums and compare against the cache (1e-9 absolute).
    pub fn validate_cache(&self, mm: &MarketModel, spec: &QuadratureSpec) -> Result<()> {
        let fresh = Strategy::priced(self.treaties.clone(), mm, spec)?;
        for (i, (a, b)) in self.premiums.iter().zip(&fresh.premiums).enumerate() {
            if (a - b).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "premium cache for risk {i} holds {a} but repricing gives {b}"
                )));
            }
        }
        Ok(())
    }

    fn check_shape(&self, mm: &MarketModel) -> Result<()> {
        if self.treaties.len() != mm.n() || self.premiums.len() != mm.n() {
            return Err(Error::Config(format!(
                "strategy shape ({} treaties, {} premiums) does not match {} risks",
                self.treaties.len(),
                self.premiums.len(),
                mm.n()
            )));
        }
        Ok(())
    }
}

/// The portfolio: claim marginals, their dependence, one premium principle
/// per risk, the insurer's utility, and aggregate premium income c.
#[derive(Debug, Clone)]
pub struct MarketModel {
    pub marginals: Vec<MarginalModel>,
    pub copula: CopulaModel,
    pub principles: Vec<PremiumPrinciple>,
    pub utility: UtilityModel,
    pub c: f64,
}

impl MarketModel {
    pub fn new(
        marginals: Vec<MarginalModel>,
        copula: CopulaModel,
        principles: Vec<PremiumPrinciple>,
        utility: UtilityModel,
        c: f64,
    ) -> Result<Self> {
        let n = marginals.len();
        if n == 0 {
            return Err(Error::Config("at least one risk is required".into()));
        }
        if principles.len() != n {
            return Err(Error::Config(format!(
                "{} premium principles for {n} risks",
                principles.len()
            )));
        }
        if !c.is_finite() {
            return Err(Error::Config(format!("aggregate premium income must be finite, got {c}")));
        }
        let dependent = !matches!(copula, CopulaModel::Independence);
        if dependent && n != 2 {
            return Err(Error::Config(format!(
                "a dependence copula requires exactly 2 risks, got {n}"
            )));
        }
        for (i, m) in marginals.iter().enumerate() {
            if dependent && matches!(m, MarginalModel::Empirical { .. }) {
                return Err(Error::Config(format!(
                    "risk {i}: empirical marginals are only supported under independence"
                )));
            }
            let order = principles[i].order();
            if let Some(max) = m.max_moment_order() {
                if order as f64 >= max {
                    return Err(Error::Config(format!(
                        "risk {i}: premium principle needs moment order {order} but the marginal \
                         only has moments strictly below {max}"
                    )));
                }
            }
        }
        Ok(MarketModel {
            marginals,
            copula,
            principles,
            utility,
            c,
        })
    }

    pub fn n(&self) -> usize {
        self.marginals.len()
    }
}

/// Net profit at a realized claim vector: c - sum_i(P_i + x_i - Z_i(x_i)).
/// Claim vector length must match the market.
pub fn net_profit(mm: &MarketModel, s: &Strategy, x: &[f64]) -> f64 {
    assert_eq!(x.len(), mm.n(), "claim vector length != risk count");
    let mut w = mm.c;
    for i in 0..x.len() {
        w -= s.premiums[i] + x[i] - s.treaties[i].eval(x[i]);
    }
    w
}

/// Quadrature-node cache for one risk: abscissae, density weights, marginal
/// cdf values, retained amounts under a treaty.
pub(crate) struct RiskNodes {
    pub(crate) nodes: quad::MarginalNodes,
    pub(crate) retained: Vec<f64>,
}

impl MarketModel {
    /// Density-weighted nodes for risk i with panel edges pinned to the
    /// treaty's kinks and the copula's cell boundaries.
    pub(crate) fn risk_nodes(
        &self,
        i: usize,
        t: &TreatyCurve,
        spec: &QuadratureSpec,
    ) -> Result<RiskNodes> {
        let mut bp = t.breakpoints();
        for u in self.copula.u_breakpoints() {
            bp.push(self.marginals[i].quantile(u)?);
        }
        let nodes = quad::marginal_nodes(&self.marginals[i], spec, &bp)?;
        let retained = nodes.x.iter().map(|&x| x - t.eval(x)).collect();
        Ok(RiskNodes { nodes, retained })
    }
}

/// E U(net profit) under the strategy. Deterministic-wealth portfolios (all
/// Full) return U exactly; divergent integrals surface as integrability
/// errors via growing tail blocks or overflow.
pub fn expected_utility(mm: &MarketModel, s: &Strategy, spec: &QuadratureSpec) -> Result<f64> {
    spec.validate()?;
    s.check_shape(mm)?;
    let w0 = mm.c - s.premiums.iter().sum::<f64>();
    if s.treaties.iter().all(|t| matches!(t, TreatyCurve::Full)) {
        return mm.utility.utility(w0);
    }
    let n = mm.n();
    let independent = matches!(mm.copula, CopulaModel::Independence);
    let value = if n == 1 {
        let t = &s.treaties[0];
        let bp = t.breakpoints();
        quad::integrate_marginal_try(
            |x| mm.utility.utility(w0 - (x - t.eval(x))),
            &mm.marginals[0],
            spec,
            &bp,
        )?
    } else if n == 2 {
        // tensor quadrature against c(u, v) f0 f1; independence is the same
        // loop with unit density, which the factorized form cross-checks
        let r0 = mm.risk_nodes(0, &s.treaties[0], spec)?;
        let r1 = mm.risk_nodes(1, &s.treaties[1], spec)?;
        quad::sum_nodes(&r0.nodes, |a| {
            let ua = r0.nodes.cdf[a];
            let base = w0 - r0.retained[a];
            quad::sum_nodes(&r1.nodes, |b| {
                let dens = if independent {
                    1.0
                } else {
                    mm.copula.density(ua, r1.nodes.cdf[b])
                };
                Ok(dens * mm.utility.utility(base - r1.retained[b])?)
            })
        })?
    } else if independent {
        match &mm.utility {
            UtilityModel::Exponential { .. } => factorized_exponential_eu(mm, s, spec)?,
            _ => monte_carlo_eu(mm, s, spec, w0)?,
        }
    } else {
        unreachable!("market validation rejects dependent portfolios with n > 2");
    };
    if !value.is_finite() || value.abs() > 1e100 {
        return Err(Error::Integrability(format!(
            "expected utility is effectively divergent ({value})"
        )));
    }
    Ok(value)
}

/// Independence + exponential utility factorizes:
/// E U = -e^{-R w0} * prod_i E e^{R (X_i - Z_i(X_i))}.
pub(crate) fn factorized_exponential_eu(
    mm: &MarketModel,
    s: &Strategy,
    spec: &QuadratureSpec,
) -> Result<f64> {
    let r = mm.utility.constant_risk_aversion().ok_or_else(|| {
        Error::Unsupported("factorized expected utility needs exponential utility".into())
    })?;
    let w0 = mm.c - s.premiums.iter().sum::<f64>();
    let mut prod = 1.0;
    for i in 0..mm.n() {
        let t = &s.treaties[i];
        let bp = t.breakpoints();
        prod *= quad::integrate_marginal_kinked(
            |x| (r * (x - t.eval(x))).exp(),
            &mm.marginals[i],
            spec,
            &bp,
        )?;
    }
    Ok(-(-r * w0).exp() * prod)
}

/// Independence, any utility, any n: antithetic Monte Carlo over joint draws.
fn monte_carlo_eu(mm: &MarketModel, s: &Strategy, spec: &QuadratureSpec, w0: f64) -> Result<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(spec.rng_seed);
    rng.set_stream(0xE0);
    let pairs = (spec.mc_samples / 2).max(8);
    let n = mm.n();
    let mut sum = 0.0;
    for _ in 0..pairs {
        let draws: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        for flip in [false, true] {
            let mut wealth = w0;
            for i in 0..n {
                let p = if flip { 1.0 - draws[i] } else { draws[i] };
                let x = mm.marginals[i]
                    .quantile(p.clamp(1e-12, spec.truncation_prob))?;
                wealth -= x - s.treaties[i].eval(x);
            }
            sum += mm.utility.utility(wealth)?;
        }
    }
    Ok(sum / (2 * pairs) as f64)
}

/// Equal-probability treaty grid: count knots from 0 up to quantile(top_prob).
pub fn knot_grid(m: &MarginalModel, count: usize, top_prob: f64) -> Result<Vec<f64>> {
    if count < 2 {
        return Err(Error::Config(format!("a treaty grid needs at least 2 knots, got {count}")));
    }
    if !(top_prob > 0.0 && top_prob < 1.0) {
        return Err(Error::Config(format!(
            "grid coverage probability must lie in (0, 1), got {top_prob}"
        )));
    }
    let mut grid = Vec::with_capacity(count);
    for j in 0..count {
        grid.push(m.quantile(top_prob * j as f64 / (count - 1) as f64)?);
    }
    grid.dedup_by(|a, b| *a <= *b);
    if grid.len() < 2 {
        return Err(Error::Config("treaty grid collapsed to fewer than 2 distinct knots".into()));
    }
    Ok(grid)
}

/// Sample a treaty on a grid as (claim, ceded, retained) rows.
pub fn sample_curve(t: &TreatyCurve, grid: &[f64]) -> Vec<(f64, f64, f64)> {
    grid.iter()
        .map(|&x| {
            let z = t.eval(x);
            (x, z, x - z)
        })
        .collect()
}

/// The moment closure each treaty-moment vector must satisfy (power means
/// nondecreasing in the order).
pub fn check_moment_closure(m: &[f64]) -> Result<()> {
    validate_moment_vector(m)
}
