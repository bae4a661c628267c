//! Independent checks on computed strategies: pointwise residuals of the
//! first-order optimality conditions, a diagnostic showing stop-loss pairs
//! cannot satisfy those conditions under FGM dependence with positive
//! association, a mixture probe exhibiting that the objective is neither
//! concave nor convex over randomized strategies, and a brute-force grid
//! search usable as ground truth on small two-risk instances.

use serde::{Deserialize, Serialize};

use crate::copula::CopulaModel;
use crate::dist::MarginalModel;
use crate::error::{Error, Result};
use crate::quad::{self, QuadratureSpec};
use crate::solver::{expected_marginal_utility, Subproblem};
use crate::treaty::{self, MarketModel, Strategy, TreatyCurve};

/// Which bound of 0 <= Z(x) <= x is active at a grid point, deciding the
/// direction of the optimality inequality checked there.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionSide {
    /// Z(x) = 0: ceding a first sliver must not pay, benefit <= cost.
    AtZero,
    /// 0 < Z(x) < x: marginal benefit and marginal cost must balance.
    Interior,
    /// Z(x) = x: ceding the last sliver must still pay, benefit >= cost.
    AtClaim,
}

/// One grid point of the optimality check: the conditional marginal benefit
/// of ceding (lhs), the marginal premium cost (rhs), and how far the active
/// inequality is violated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualRow {
    pub x: f64,
    pub ceded: f64,
    pub side: ConditionSide,
    pub lhs: f64,
    pub rhs: f64,
    /// max(0, signed residual in the direction the active case forbids);
    /// interior points take the absolute imbalance.
    pub violation: f64,
}

/// Residual rows for one risk plus their maximum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskResiduals {
    pub risk: usize,
    pub max_violation: f64,
    pub rows: Vec<ResidualRow>,
}

/// Optimality-condition residuals of a whole strategy. `m0` is the expected
/// marginal utility of net profit under the strategy, the natural scale for
/// reading the violations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub m0: f64,
    pub max_violation: f64,
    pub risks: Vec<RiskResiduals>,
}

/// Grid the residual check evaluates on: a piecewise-linear treaty is checked
/// at its own knots, anything else on an equal-probability grid with the
/// treaty's kinks pinned in.
fn residual_grid(t: &TreatyCurve, m: &MarginalModel) -> Result<Vec<f64>> {
    match t {
        TreatyCurve::PiecewiseLinear { x, .. } => Ok(x.clone()),
        _ => {
            let mut g = treaty::knot_grid(m, 201, 1.0 - 1e-6)?;
            let top = *g.last().expect("knot grids hold at least 2 points");
            for b in t.breakpoints() {
                if b > 0.0 && b < top {
                    g.push(b);
                }
            }
            g.sort_by(|a, b| a.partial_cmp(b).unwrap());
            g.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * top.max(1.0));
            Ok(g)
        }
    }
}

/// A grid point counts as sitting on a bound when the ceded value is within
/// 1e-6 * x of it; barrier smoothing and clamped sampling leave values that
/// close to the bounds, and the interior equality takes over beyond.
fn classify(x: f64, z: f64, lhs: f64, rhs: f64) -> (ConditionSide, f64) {
    let tol = 1e-6 * x;
    if z <= tol {
        (ConditionSide::AtZero, (lhs - rhs).max(0.0))
    } else if z >= x - tol {
        (ConditionSide::AtClaim, (rhs - lhs).max(0.0))
    } else {
        (ConditionSide::Interior, (lhs - rhs).abs())
    }
}

/// Check a strategy against the pointwise first-order optimality conditions.
///
/// At claim level x with ceded amount z = Z_i(x), the conditional expected
/// marginal utility of net profit given X_i = x (the benefit of ceding one
/// more unit at x) is compared against the marginal premium cost
/// m0 * sum_r dPsi/du_r * r * z^(r-1), with m0 the portfolio-wide expected
/// marginal utility. Optimality demands benefit <= cost where z = 0,
/// equality strictly inside, and benefit >= cost where z = x. Moments and
/// the active premium are recomputed from the curves, so the report checks
/// the strategy exactly as handed in.
pub fn optimality_residual(
    mm: &MarketModel,
    s: &Strategy,
    spec: &QuadratureSpec,
) -> Result<ResidualReport> {
    spec.validate()?;
    let n = mm.n();
    if s.treaties.len() != n || s.premiums.len() != n {
        return Err(Error::Config(format!(
            "strategy shape ({} treaties, {} premiums) does not match {n} risks",
            s.treaties.len(),
            s.premiums.len()
        )));
    }
    let m0 = expected_marginal_utility(mm, s, spec)?;
    let mut moments = Vec::with_capacity(n);
    for i in 0..n {
        moments.push(s.treaties[i].moments(
            &mm.marginals[i],
            mm.principles[i].order() as u32,
            spec,
        )?);
    }
    let mut risks = Vec::with_capacity(n);
    let mut max_violation = 0.0f64;
    for i in 0..n {
        let sp = Subproblem::new(mm, i, &moments, &s.treaties, spec)?;
        let psi = mm.principles[i].premium(&moments[i])?;
        let grad = mm.principles[i].premium_gradient(&moments[i])?;
        let marginal_cost =
            |z: f64| -> f64 { grad.iter().enumerate().map(|(j, g)| g * (j + 1) as f64 * z.powi(j as i32)).sum() };
        let grid = residual_grid(&s.treaties[i], &mm.marginals[i])?;
        let mut rows = Vec::with_capacity(grid.len());
        let mut risk_max = 0.0f64;
        for &x in &grid {
            if x <= 0.0 {
                continue;
            }
            let z = s.treaties[i].eval(x);
            let lhs = sp.lambda_at(x, z - psi)?;
            let rhs = m0 * marginal_cost(z);
            let (side, violation) = classify(x, z, lhs, rhs);
            risk_max = risk_max.max(violation);
            rows.push(ResidualRow { x, ceded: z, side, lhs, rhs, violation });
        }
        max_violation = max_violation.max(risk_max);
        risks.push(RiskResiduals { risk: i, max_violation: risk_max, rows });
    }
    Ok(ResidualReport { m0, max_violation, risks })
}

/// Composite Gauss-Legendre over [a, b] with equal-width panels. The panel
/// layout scales continuously with the interval, so the value is a smooth
/// function of b and central differences through it stay clean.
fn gl_integral(a: f64, b: f64, panels: usize, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let (gn, gw) = quad::gauss_legendre_8();
    let width = (b - a) / panels as f64;
    let mut acc = 0.0;
    for p in 0..panels {
        let mid = a + (p as f64 + 0.5) * width;
        let half = 0.5 * width;
        for k in 0..8 {
            acc += gw[k] * half * f(mid + half * gn[k])?;
        }
    }
    Ok(acc)
}

/// Diagnostic ruling out stop-loss treaties under FGM dependence with
/// positive association.
///
/// For a stop-loss pair to satisfy the optimality conditions, the quantity
///
/// ```text
/// lhs(M2) = INT_0^M2 (e^{R M2} - e^{R x}) * d3(F2(x)) * f2(x) dx
/// ```
///
/// (with d3 the FGM copula's third mixed derivative, 2 alpha (2 F2 - 1))
/// would have to be constant in the partner's conditioning level; because d3
/// does not depend on that level, `u` is accepted, validated, and otherwise
/// unused — the value is the same at every level. The derivative of lhs in
/// M2 equals R e^{R M2} * 2 alpha * F2(M2) (F2(M2) - 1), which is strictly
/// negative for every M2 > 0 when alpha > 0, so only M2 = 0 survives.
///
/// Returns (lhs, analytic derivative, central-difference derivative).
pub fn stoploss_diagnostic(
    f2: &MarginalModel,
    alpha: f64,
    r: f64,
    m2: f64,
    u: f64,
) -> Result<(f64, f64, f64)> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Domain(format!(
            "the diagnostic needs a positive association parameter in (0, 1], got {alpha}"
        )));
    }
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::Domain(format!("risk aversion must be positive and finite, got {r}")));
    }
    if !(m2 >= 0.0 && m2.is_finite()) {
        return Err(Error::Domain(format!("retention must be nonnegative and finite, got {m2}")));
    }
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::Domain(format!("conditioning level must lie in [0, 1], got {u}")));
    }
    if m2 == 0.0 {
        return Ok((0.0, 0.0, 0.0));
    }
    let cop = CopulaModel::fgm(alpha)?;
    let lhs_at = |top: f64| -> Result<f64> {
        gl_integral(0.0, top, 256, |x| {
            Ok(((r * top).exp() - (r * x).exp()) * cop.fgm_d3(u, f2.cdf(x))? * f2.pdf(x)?)
        })
    };
    let lhs = lhs_at(m2)?;
    let fm = f2.cdf(m2);
    let d_analytic = r * (r * m2).exp() * 2.0 * alpha * fm * (fm - 1.0);
    let h = (1e-5 * (1.0 + m2)).min(0.5 * m2);
    let d_numeric = (lhs_at(m2 + h)? - lhs_at(m2 - h)?) / (2.0 * h);
    Ok((lhs, d_analytic, d_numeric))
}

/// Output of [`concavity_probe`]: the mixture objective along the segment
/// between a stop-loss strategy and a layered one is, up to a negative
/// constant factor, t -> e^{At} (B + (C - B) t); its second derivative is
/// e^{At} A (AB + 2(C - B) + A(C - B) t).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcavityProbe {
    /// A: risk aversion times the premium difference between the endpoints.
    pub premium_rate: f64,
    /// B: E e^{R (X - Z(X))} under the stop-loss treaty Z(x) = (x - m)+.
    pub stoploss_factor: f64,
    /// C: E e^{R (X - Z~(X))} under the layered treaty that cedes fully
    /// below a, nothing on (a, b), and the excess over b beyond.
    pub layered_factor: f64,
    /// A (AB + 2(C - B)): carries the sign of the mixture objective's second
    /// derivative at t = 0; both signs are reachable, so the objective is
    /// neither concave nor convex over randomized strategies.
    pub sign_quantity: f64,
    /// The stop-loss retention m implied by the expected-ceded shift.
    pub retention: f64,
    /// (t, central-difference second derivative of the mixture factor).
    pub second_derivative: Vec<(f64, f64)>,
}

/// Probe the curvature of the objective along a mixture of two strategies
/// for a single exponential claim (rate `lambda_rate`) under exponential
/// utility and an expected-value premium with loading `theta`.
///
/// The endpoints cede the excess over m, respectively everything below `a`
/// plus the excess over `b`. The retention m is pinned by requiring the two
/// expected ceded amounts to differ by exactly `eps_shift`, which makes the
/// premium difference (1 + theta) * eps_shift with no cancellation. For
/// small a and |eps_shift| the curvature's sign equals the sign of
/// `eps_shift`.
pub fn concavity_probe(
    lambda_rate: f64,
    r: f64,
    theta: f64,
    a: f64,
    b: f64,
    eps_shift: f64,
) -> Result<ConcavityProbe> {
    if !(lambda_rate > 0.0 && lambda_rate.is_finite()) {
        return Err(Error::Domain(format!(
            "claim rate must be positive and finite, got {lambda_rate}"
        )));
    }
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::Domain(format!("risk aversion must be positive and finite, got {r}")));
    }
    if r == lambda_rate {
        return Err(Error::Domain(format!(
            "risk aversion equal to the claim rate ({r}) degenerates the closed forms"
        )));
    }
    if !(theta >= 0.0 && theta.is_finite()) {
        return Err(Error::Domain(format!("premium loading must be nonnegative, got {theta}")));
    }
    if !(a > 0.0 && b > a && b.is_finite()) {
        return Err(Error::Domain(format!(
            "layer bounds must satisfy 0 < a < b < infinity, got a = {a}, b = {b}"
        )));
    }
    if !eps_shift.is_finite() {
        return Err(Error::Domain(format!("expected-ceded shift must be finite, got {eps_shift}")));
    }
    // e^{-lambda m} for the retention matching the requested shift; expm1
    // keeps the small-a bracket accurate.
    let la = lambda_rate * a;
    let mass = (-la).exp() * (la.exp_m1() - la) + (-lambda_rate * b).exp() - lambda_rate * eps_shift;
    if mass <= 0.0 {
        return Err(Error::Domain(format!(
            "expected-ceded shift {eps_shift} leaves no admissible retention (mass {mass})"
        )));
    }
    let m = -mass.ln() / lambda_rate;
    if m <= 0.0 {
        return Err(Error::Domain(format!(
            "expected-ceded shift {eps_shift} implies a nonpositive retention {m}"
        )));
    }
    let growth = r * (1.0 + theta) * eps_shift;
    let d = r - lambda_rate;
    let base = (r * (d * m).exp() - lambda_rate) / d;
    let alt =
        1.0 - (-la).exp() - lambda_rate * (d * a).exp() / d + r * (d * b).exp() / d;
    let sign_quantity = growth * (growth * base + 2.0 * (alt - base));
    let phi = |t: f64| (growth * t).exp() * (base + (alt - base) * t);
    let h = 2.5e-4;
    let second_derivative = (0..=20)
        .map(|j| {
            let t = j as f64 / 20.0;
            (t, (phi(t + h) - 2.0 * phi(t) + phi(t - h)) / (h * h))
        })
        .collect();
    Ok(ConcavityProbe {
        premium_rate: growth,
        stoploss_factor: base,
        layered_factor: alt,
        sign_quantity,
        retention: m,
        second_derivative,
    })
}

/// One risk's fixed machinery during the grid search: treaty knots and the
/// quadrature nodes with those knots pinned as panel edges, so every lattice
/// candidate integrates over the same nodes.
struct GridRisk {
    grid: Vec<f64>,
    nodes: quad::MarginalNodes,
    order: u32,
}

/// Shared state of the brute-force search.
struct Oracle<'a> {
    mm: &'a MarketModel,
    risks: Vec<GridRisk>,
    /// Joint density at node pairs, row-major over (risk-0 node, risk-1
    /// node); None under independence or when the cache would be oversized.
    dens: Option<Vec<f64>>,
    /// Risk aversion when the utility is exponential (enables the
    /// factorized evaluation path).
    expo: Option<f64>,
    /// U(0); the exponential path scales by it so either sign convention of
    /// the utility works unchanged.
    u_zero: f64,
    independent: bool,
}

impl Oracle<'_> {
    fn density(&self, a: usize, b: usize) -> f64 {
        if self.independent {
            1.0
        } else if let Some(d) = &self.dens {
            d[a * self.risks[1].nodes.x.len() + b]
        } else {
            self.mm.copula.density(self.risks[0].nodes.cdf[a], self.risks[1].nodes.cdf[b])
        }
    }

    /// Conditional partner factor per active node under exponential utility:
    /// h[a] = E_b density * e^{R ret_p(b)} over the partner's nodes.
    fn phase_cache(&self, i: usize, partner_exp: &[f64]) -> Result<Vec<f64>> {
        let na = &self.risks[i].nodes;
        let np = &self.risks[1 - i].nodes;
        if self.independent {
            let h0 = quad::sum_nodes(np, |b| Ok(partner_exp[b]))?;
            return Ok(vec![h0; na.x.len()]);
        }
        (0..na.x.len())
            .map(|a| {
                quad::sum_nodes(np, |b| {
                    let d = if i == 0 { self.density(a, b) } else { self.density(b, a) };
                    Ok(d * partner_exp[b])
                })
            })
            .collect()
    }

    /// Expected utility of the portfolio with risk i's treaty replaced by
    /// `t`, the partner frozen at the phase's premium and retained values.
    /// Premiums are recomputed from the candidate's own moments on every
    /// call, so no candidate is priced stale.
    fn phase_value(
        &self,
        i: usize,
        t: &TreatyCurve,
        partner_premium: f64,
        partner_ret: &[f64],
        h: Option<&[f64]>,
    ) -> Result<f64> {
        let rk = &self.risks[i];
        let zs: Vec<f64> = rk.nodes.x.iter().map(|&x| t.eval(x)).collect();
        let mut mom = vec![0.0; rk.order as usize];
        for r in 1..=rk.order as i32 {
            mom[(r - 1) as usize] = quad::sum_nodes(&rk.nodes, |a| Ok(zs[a].powi(r)))?;
        }
        let pi = self.mm.principles[i].premium(&mom)?;
        let w0 = self.mm.c - pi - partner_premium;
        if let (Some(r), Some(h)) = (self.expo, h) {
            let e = quad::sum_nodes(&rk.nodes, |a| Ok((r * (rk.nodes.x[a] - zs[a])).exp() * h[a]))?;
            return Ok(self.u_zero * (-r * w0).exp() * e);
        }
        let (n0, n1) = (&self.risks[0].nodes, &self.risks[1].nodes);
        if i == 0 {
            quad::sum_nodes(n0, |a| {
                let bw = w0 - (n0.x[a] - zs[a]);
                quad::sum_nodes(n1, |b| {
                    Ok(self.density(a, b) * self.mm.utility.utility(bw - partner_ret[b])?)
                })
            })
        } else {
            quad::sum_nodes(n1, |b| {
                let bw = w0 - (n1.x[b] - zs[b]);
                quad::sum_nodes(n0, |a| {
                    Ok(self.density(a, b) * self.mm.utility.utility(bw - partner_ret[a])?)
                })
            })
        }
    }
}

/// Ceded values for one risk's lattice indices: z_j = x_j * k_j / (levels-1),
/// with a single-level lattice pinned at zero.
fn lattice_z(grid: &[f64], ks: &[usize], levels: usize) -> Vec<f64> {
    if levels <= 1 {
        return vec![0.0; grid.len()];
    }
    grid.iter()
        .zip(ks)
        .map(|(&x, &k)| x * k as f64 / (levels - 1) as f64)
        .collect()
}

/// Brute-force ground truth for two-risk portfolios: coordinate descent over
/// per-knot ceded values on a discretized treaty space.
///
/// Each treaty is piecewise linear on an equal-probability grid of
/// `x_grid_size` knots; the ceded value at knot j moves on the lattice
/// {0, step, ..., x_j} with step x_j / (z_grid_size - 1). Sweeps walk every
/// knot of both risks, trying one lattice step up and down; premiums are
/// recomputed from the candidate's own discrete moments at every evaluation,
/// never cached across sweeps. The search stops when a full sweep finds no
/// single-knot step that strictly improves expected utility, and returns the
/// final strategy (repriced by adaptive quadrature) with its expected
/// utility. Candidates whose evaluation overflows or diverges are treated as
/// rejected. Both grids are capped at 64 points; anything larger is refused.
pub fn brute_force_oracle(
    mm: &MarketModel,
    x_grid_size: usize,
    z_grid_size: usize,
    spec: &QuadratureSpec,
) -> Result<(Strategy, f64)> {
    spec.validate()?;
    if mm.n() != 2 {
        return Err(Error::Unsupported(format!(
            "the grid oracle searches exactly two risks, got {}",
            mm.n()
        )));
    }
    if x_grid_size > 64 || z_grid_size > 64 {
        return Err(Error::Refused(format!(
            "grid {x_grid_size} x {z_grid_size} exceeds the 64-point cost guard"
        )));
    }
    if x_grid_size < 2 {
        return Err(Error::Config(format!(
            "the claim grid needs at least 2 knots, got {x_grid_size}"
        )));
    }
    if z_grid_size < 1 {
        return Err(Error::Config("the ceded lattice needs at least 1 level".into()));
    }
    let independent = matches!(mm.copula, CopulaModel::Independence);
    let mut risks = Vec::with_capacity(2);
    for i in 0..2 {
        let grid = treaty::knot_grid(&mm.marginals[i], x_grid_size, 1.0 - 1e-6)?;
        let zero = TreatyCurve::piecewise_linear(grid.clone(), vec![0.0; grid.len()])?;
        let rn = mm.risk_nodes(i, &zero, spec)?;
        risks.push(GridRisk { grid, nodes: rn.nodes, order: mm.principles[i].order() as u32 });
    }
    let pairs = risks[0].nodes.x.len() * risks[1].nodes.x.len();
    let dens = if independent || pairs > 8_000_000 {
        None
    } else {
        let n1 = risks[1].nodes.x.len();
        let mut d = vec![0.0; pairs];
        for a in 0..risks[0].nodes.x.len() {
            for b in 0..n1 {
                d[a * n1 + b] = mm.copula.density(risks[0].nodes.cdf[a], risks[1].nodes.cdf[b]);
            }
        }
        Some(d)
    };
    let expo = mm.utility.constant_risk_aversion();
    let oracle = Oracle {
        mm,
        risks,
        dens,
        expo,
        u_zero: mm.utility.utility(0.0)?,
        independent,
    };

    let levels = z_grid_size;
    let mut ks: Vec<Vec<usize>> = (0..2)
        .map(|i| vec![levels.saturating_sub(1); oracle.risks[i].grid.len()])
        .collect();
    let mut sweeps = 0usize;
    loop {
        sweeps += 1;
        if sweeps > 1000 {
            return Err(Error::SolverStall(
                "grid oracle was still improving after 1000 sweeps".into(),
            ));
        }
        let mut improved = false;
        for i in 0..2 {
            let p = 1 - i;
            let tp = TreatyCurve::from_samples(
                oracle.risks[p].grid.clone(),
                lattice_z(&oracle.risks[p].grid, &ks[p], levels),
            )?;
            let partner_zs: Vec<f64> =
                oracle.risks[p].nodes.x.iter().map(|&x| tp.eval(x)).collect();
            let partner_ret: Vec<f64> = oracle.risks[p]
                .nodes
                .x
                .iter()
                .zip(&partner_zs)
                .map(|(&x, &z)| x - z)
                .collect();
            let mut pmom = vec![0.0; oracle.risks[p].order as usize];
            for r in 1..=oracle.risks[p].order as i32 {
                pmom[(r - 1) as usize] =
                    quad::sum_nodes(&oracle.risks[p].nodes, |b| Ok(partner_zs[b].powi(r)))?;
            }
            let partner_premium = mm.principles[p].premium(&pmom)?;
            let h = match expo {
                Some(r) => {
                    let pe: Vec<f64> = partner_ret.iter().map(|&ret| (r * ret).exp()).collect();
                    Some(oracle.phase_cache(i, &pe)?)
                }
                None => None,
            };
            let cur_t = TreatyCurve::from_samples(
                oracle.risks[i].grid.clone(),
                lattice_z(&oracle.risks[i].grid, &ks[i], levels),
            )?;
            let mut cur =
                oracle.phase_value(i, &cur_t, partner_premium, &partner_ret, h.as_deref())?;
            for j in 1..oracle.risks[i].grid.len() {
                for delta in [1isize, -1] {
                    let kj = ks[i][j] as isize + delta;
                    if kj < 0 || kj >= levels as isize {
                        continue;
                    }
                    let mut kz = ks[i].clone();
                    kz[j] = kj as usize;
                    let tz = TreatyCurve::from_samples(
                        oracle.risks[i].grid.clone(),
                        lattice_z(&oracle.risks[i].grid, &kz, levels),
                    )?;
                    match oracle.phase_value(i, &tz, partner_premium, &partner_ret, h.as_deref()) {
                        Ok(v) if v > cur => {
                            ks[i] = kz;
                            cur = v;
                            improved = true;
                            break;
                        }
                        _ => {}
                    }
                }
            }
        }
        if !improved {
            break;
        }
    }
    let treaties: Vec<TreatyCurve> = (0..2)
        .map(|i| {
            TreatyCurve::from_samples(
                oracle.risks[i].grid.clone(),
                lattice_z(&oracle.risks[i].grid, &ks[i], levels),
            )
        })
        .collect::<Result<_>>()?;
    let strat = Strategy::priced(treaties, mm, spec)?;
    let value = treaty::expected_utility(mm, &strat, spec)?;
    Ok((strat, value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{PremiumPrinciple, UtilityModel};
    use crate::solver::{optimize, SolverConfig};

    fn single_risk_market(theta: f64, r: f64, c: f64) -> MarketModel {
        MarketModel::new(
            vec![MarginalModel::exponential(1.0).unwrap()],
            CopulaModel::Independence,
            vec![PremiumPrinciple::expected_value(theta).unwrap()],
            UtilityModel::exponential(r).unwrap(),
            c,
        )
        .unwrap()
    }

    fn two_risk_market(copula: CopulaModel, t1: f64, t2: f64, r: f64, c: f64) -> MarketModel {
        MarketModel::new(
            vec![
                MarginalModel::exponential(1.0).unwrap(),
                MarginalModel::exponential(1.0).unwrap(),
            ],
            copula,
            vec![
                PremiumPrinciple::expected_value(t1).unwrap(),
                PremiumPrinciple::expected_value(t2).unwrap(),
            ],
            UtilityModel::exponential(r).unwrap(),
            c,
        )
        .unwrap()
    }

    /// Deductible of the single-risk closed form: e^{R M} = (1 + theta)
    /// E e^{R min(X, M)} for Exp(1) claims, solved by bisection.
    fn classical_deductible(r: f64, theta: f64) -> f64 {
        let short = |m: f64| -> f64 {
            // E e^{R min(X, M)} for X ~ Exp(1)
            if (r - 1.0).abs() < 1e-12 {
                m + 1.0
            } else {
                (1.0 - r * ((r - 1.0) * m).exp()) / (1.0 - r)
            }
        };
        let f = |m: f64| (r * m).exp() - (1.0 + theta) * short(m);
        let (mut lo, mut hi) = (0.0f64, 20.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn an_analytic_optimum_passes_the_optimality_check() {
        let mm = single_risk_market(0.3, 1.0, 4.0);
        let spec = QuadratureSpec::default();
        let m = classical_deductible(1.0, 0.3);
        let s = Strategy::priced(vec![TreatyCurve::StopLoss { retention: m }], &mm, &spec).unwrap();
        let rep = optimality_residual(&mm, &s, &spec).unwrap();
        assert!(rep.m0 > 0.0);
        assert!(
            rep.max_violation <= 1e-6 * rep.m0,
            "analytic optimum shows violation {:.3e} against m0 {:.3e}",
            rep.max_violation,
            rep.m0
        );
        // all three sides appear: ceding starts exactly at the retention
        let rows = &rep.risks[0].rows;
        assert!(rows.iter().any(|r| r.side == ConditionSide::AtZero));
        assert!(rows.iter().any(|r| r.side == ConditionSide::Interior));
    }

    #[test]
    fn perturbing_an_optimal_treaty_is_flagged() {
        let mm = single_risk_market(0.3, 1.0, 4.0);
        let spec = QuadratureSpec::default();
        let m = classical_deductible(1.0, 0.3);
        let grid = treaty::knot_grid(&mm.marginals[0], 201, 1.0 - 1e-6).unwrap();
        let z: Vec<f64> = grid
            .iter()
            .map(|&x| {
                let base = (x - m).max(0.0);
                if x >= m + 0.5 && x <= m + 1.5 {
                    (base + 0.1).min(x)
                } else {
                    base
                }
            })
            .collect();
        let t = TreatyCurve::from_samples(grid, z).unwrap();
        let s = Strategy::priced(vec![t], &mm, &spec).unwrap();
        let rep = optimality_residual(&mm, &s, &spec).unwrap();
        assert!(
            rep.max_violation > 1e-2 * rep.m0,
            "perturbed treaty only shows violation {:.3e} against m0 {:.3e}",
            rep.max_violation,
            rep.m0
        );
    }

    #[test]
    fn full_cession_under_heavy_loading_violates_the_full_branch() {
        let mm = single_risk_market(5.0, 1.0, 4.0);
        let spec = QuadratureSpec::default();
        let s = Strategy::priced(vec![TreatyCurve::Full], &mm, &spec).unwrap();
        let rep = optimality_residual(&mm, &s, &spec).unwrap();
        let rows = &rep.risks[0].rows;
        assert!(rows.iter().all(|r| r.side == ConditionSide::AtClaim));
        // under full cession net profit is deterministic, so the benefit side
        // equals m0 at every claim level while the cost side is m0 (1 + theta):
        // violation = theta * m0 everywhere
        for r in rows {
            assert!(
                (r.violation - 5.0 * rep.m0).abs() <= 1e-6 * rep.m0,
                "violation {:.6e} differs from 5 m0 = {:.6e} at x = {}",
                r.violation,
                5.0 * rep.m0,
                r.x
            );
        }
        assert!(rep.max_violation > 1e-2 * rep.m0);
    }

    #[test]
    fn a_converged_run_passes_the_residual_invariant() {
        let mm = single_risk_market(0.3, 1.0, 4.0);
        let spec = QuadratureSpec::default();
        let cfg = SolverConfig::default();
        let (s, rep) = optimize(&mm, &cfg, &spec).unwrap();
        let res = optimality_residual(&mm, &s, &spec).unwrap();
        assert!(rep.converged);
        assert!(
            res.max_violation <= 10.0 * cfg.outer_tol * res.m0.abs().max(1e-300),
            "converged run shows violation {:.3e} against m0 {:.3e}",
            res.max_violation,
            res.m0
        );
    }

    #[test]
    fn diagnostic_is_zero_at_zero_retention() {
        let f2 = MarginalModel::pareto(4.0, 5.0).unwrap();
        let (lhs, da, dn) = stoploss_diagnostic(&f2, 0.5, 1.0, 0.0, 0.3).unwrap();
        assert_eq!(lhs, 0.0);
        assert_eq!(da, 0.0);
        assert_eq!(dn, 0.0);
    }

    #[test]
    fn diagnostic_matches_a_simpson_oracle() {
        let f2 = MarginalModel::pareto(4.0, 5.0).unwrap();
        let (alpha, r, m2) = (0.5, 1.0, 1.0);
        let (lhs, _, _) = stoploss_diagnostic(&f2, alpha, r, m2, 0.3).unwrap();
        // composite Simpson over [0, m2] as an independent integration method
        let n = 20_000usize;
        let h = m2 / n as f64;
        let f = |x: f64| {
            let fx = f2.cdf(x);
            ((r * m2).exp() - (r * x).exp()) * 2.0 * alpha * (2.0 * fx - 1.0) * f2.pdf(x).unwrap()
        };
        let mut acc = f(0.0) + f(m2);
        for k in 1..n {
            acc += f(k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        let simpson = acc * h / 3.0;
        assert!(
            (lhs - simpson).abs() <= 1e-8 * simpson.abs().max(1e-8),
            "lhs {lhs:.12e} vs simpson {simpson:.12e}"
        );
    }

    #[test]
    fn diagnostic_derivative_matches_finite_differences() {
        let f2 = MarginalModel::pareto(4.0, 5.0).unwrap();
        let (alpha, r, m2) = (0.5, 1.0, 1.0);
        let (_, da, dn) = stoploss_diagnostic(&f2, alpha, r, m2, 0.3).unwrap();
        assert!(
            (da - dn).abs() <= 1e-5 * da.abs(),
            "analytic {da:.10e} vs numeric {dn:.10e}"
        );
        // independent central difference straight through the returned lhs
        let h = 1e-5;
        let (lp, _, _) = stoploss_diagnostic(&f2, alpha, r, m2 + h, 0.3).unwrap();
        let (lm, _, _) = stoploss_diagnostic(&f2, alpha, r, m2 - h, 0.3).unwrap();
        let fd = (lp - lm) / (2.0 * h);
        assert!(
            (da - fd).abs() <= 1e-5 * da.abs(),
            "analytic {da:.10e} vs test-side difference {fd:.10e}"
        );
    }

    #[test]
    fn diagnostic_decreases_in_the_retention() {
        let f2 = MarginalModel::pareto(4.0, 5.0).unwrap();
        let grid = [0.25, 0.5, 1.0, 2.0, 4.0];
        let mut prev = 0.0; // lhs at retention 0
        for &m2 in &grid {
            let (lhs, da, _) = stoploss_diagnostic(&f2, 0.5, 1.0, m2, 0.3).unwrap();
            assert!(da < 0.0, "derivative {da:.3e} at retention {m2}");
            assert!(lhs < prev, "lhs {lhs:.6e} did not decrease at retention {m2}");
            prev = lhs;
        }
    }

    #[test]
    fn diagnostic_ignores_the_conditioning_level() {
        let f2 = MarginalModel::pareto(4.0, 5.0).unwrap();
        let a = stoploss_diagnostic(&f2, 0.5, 1.0, 1.5, 0.05).unwrap();
        let b = stoploss_diagnostic(&f2, 0.5, 1.0, 1.5, 0.95).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn diagnostic_rejects_out_of_range_parameters() {
        let f2 = MarginalModel::pareto(4.0, 5.0).unwrap();
        assert!(matches!(
            stoploss_diagnostic(&f2, 0.0, 1.0, 1.0, 0.3),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            stoploss_diagnostic(&f2, 0.5, 1.0, -1.0, 0.3),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            stoploss_diagnostic(&f2, 0.5, 1.0, 1.0, 1.5),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn probe_is_exactly_zero_at_zero_shift() {
        let p = concavity_probe(1.0, 0.5, 0.3, 0.05, 1.0, 0.0).unwrap();
        assert_eq!(p.premium_rate, 0.0);
        assert_eq!(p.sign_quantity, 0.0);
    }

    #[test]
    fn probe_sign_follows_the_shift_direction() {
        for (eps, sign) in [(1e-3, 1.0), (-1e-3, -1.0)] {
            let p = concavity_probe(1.0, 0.5, 0.3, 0.05, 1.0, eps).unwrap();
            assert!(
                p.sign_quantity * sign > 0.0,
                "shift {eps:+e} gives curvature quantity {:+.6e}",
                p.sign_quantity
            );
        }
    }

    #[test]
    fn probe_factors_match_quadrature_oracles() {
        let (lam, r, theta, a, b, eps) = (1.0, 0.5, 0.3, 0.05, 1.0, 1e-3);
        let p = concavity_probe(lam, r, theta, a, b, eps).unwrap();
        let m = p.retention;
        let marg = MarginalModel::exponential(lam).unwrap();
        let spec = QuadratureSpec::default();
        // E e^{R (X - Z)} with Z = (x - m)+ retains min(x, m)
        let base = quad::integrate_marginal_kinked(
            |x| (r * x.min(m)).exp(),
            &marg,
            &spec,
            &[m],
        )
        .unwrap();
        // the layered treaty retains 0 on [0, a], x on (a, b), b beyond
        let alt = quad::integrate_marginal_kinked(
            |x| {
                let kept = if x <= a {
                    0.0
                } else if x < b {
                    x
                } else {
                    b
                };
                (r * kept).exp()
            },
            &marg,
            &spec,
            &[a, b],
        )
        .unwrap();
        assert!(
            (p.stoploss_factor - base).abs() <= 1e-6 * base.abs(),
            "stop-loss factor {:.10e} vs quadrature {base:.10e}",
            p.stoploss_factor
        );
        assert!(
            (p.layered_factor - alt).abs() <= 1e-6 * alt.abs(),
            "layered factor {:.10e} vs quadrature {alt:.10e}",
            p.layered_factor
        );
        // the premium gap: loading times the difference of expected ceded
        let ceded_base = quad::integrate_marginal_kinked(
            |x| (x - m).max(0.0),
            &marg,
            &spec,
            &[m],
        )
        .unwrap();
        let ceded_alt = quad::integrate_marginal_kinked(
            |x| {
                if x <= a {
                    x
                } else if x < b {
                    0.0
                } else {
                    x - b
                }
            },
            &marg,
            &spec,
            &[a, b],
        )
        .unwrap();
        let gap = r * (1.0 + theta) * (ceded_alt - ceded_base);
        assert!(
            (p.premium_rate - gap).abs() <= 1e-8,
            "premium rate {:.10e} vs quadrature {gap:.10e}",
            p.premium_rate
        );
    }

    #[test]
    fn probe_numeric_second_derivative_matches_the_closed_form() {
        let p = concavity_probe(1.0, 0.5, 0.3, 0.05, 1.0, 1e-3).unwrap();
        let (a, b, c) = (p.premium_rate, p.stoploss_factor, p.layered_factor);
        for &(t, num) in &p.second_derivative {
            let ana = (a * t).exp() * a * (a * b + 2.0 * (c - b) + a * (c - b) * t);
            assert!(
                (num - ana).abs() <= 1e-6 * ana.abs().max(1.0),
                "t = {t}: numeric {num:.10e} vs closed form {ana:.10e}"
            );
        }
    }

    #[test]
    fn probe_full_cession_limit_pins_the_stoploss_factor_at_one() {
        // pick the shift that pushes the retention to (almost) zero
        let (lam, a, b) = (1.0, 0.05, 1.0);
        let la: f64 = lam * a;
        let eps = ((-la).exp() * (la.exp_m1() - la) + (-lam * b).exp() - (-lam * 1e-8f64).exp())
            / lam;
        let p = concavity_probe(lam, 0.5, 0.3, a, b, eps).unwrap();
        assert!(p.retention <= 1e-6);
        assert!(
            (p.stoploss_factor - 1.0).abs() <= 1e-6,
            "stop-loss factor {:.10e} away from 1",
            p.stoploss_factor
        );
    }

    #[test]
    fn probe_rejects_degenerate_parameters() {
        assert!(matches!(
            concavity_probe(1.0, 1.0, 0.3, 0.05, 1.0, 1e-3),
            Err(Error::Domain(_))
        ));
        // a shift larger than the whole bracket mass has no retention
        assert!(matches!(
            concavity_probe(1.0, 0.5, 0.3, 0.05, 1.0, 10.0),
            Err(Error::Domain(_))
        ));
        // a strongly negative shift would demand a nonpositive retention
        assert!(matches!(
            concavity_probe(1.0, 0.5, 0.3, 0.05, 1.0, -10.0),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            concavity_probe(1.0, 0.5, 0.3, 1.0, 0.5, 1e-3),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn degenerate_lattice_forces_a_null_strategy() {
        // risk aversion below the claim rates keeps full retention integrable
        let mm = two_risk_market(CopulaModel::Independence, 0.3, 0.5, 0.5, 4.0);
        let spec = QuadratureSpec::default();
        let (s, value) = brute_force_oracle(&mm, 2, 1, &spec).unwrap();
        for t in &s.treaties {
            for &x in &[0.3, 1.0, 2.5, 7.0] {
                assert_eq!(t.eval(x), 0.0);
            }
        }
        let null = Strategy::priced(vec![TreatyCurve::Null, TreatyCurve::Null], &mm, &spec).unwrap();
        let direct = treaty::expected_utility(&mm, &null, &spec).unwrap();
        assert!(
            (value - direct).abs() <= 1e-6 * direct.abs(),
            "oracle value {value:.10e} vs direct evaluation {direct:.10e}"
        );
    }

    #[test]
    fn oracle_curves_respect_the_ceded_bounds() {
        let mm = two_risk_market(CopulaModel::frank(5.0).unwrap(), 0.3, 0.5, 1.0, 4.0);
        let spec = QuadratureSpec {
            mesh_points: 24,
            truncation_prob: 1.0 - 1e-8,
            ..Default::default()
        };
        let (s, _) = brute_force_oracle(&mm, 8, 6, &spec).unwrap();
        for t in &s.treaties {
            for j in 0..=200 {
                let x = j as f64 * 0.05;
                let z = t.eval(x);
                assert!(z >= 0.0 && z <= x + 1e-12, "z = {z} at x = {x}");
            }
        }
    }

    #[test]
    fn oracle_rejects_oversized_grids_and_small_portfolios() {
        let spec = QuadratureSpec::default();
        let mm2 = two_risk_market(CopulaModel::Independence, 0.3, 0.5, 1.0, 4.0);
        assert!(matches!(
            brute_force_oracle(&mm2, 65, 8, &spec),
            Err(Error::Refused(_))
        ));
        assert!(matches!(
            brute_force_oracle(&mm2, 8, 65, &spec),
            Err(Error::Refused(_))
        ));
        let mm1 = single_risk_market(0.3, 1.0, 4.0);
        assert!(matches!(
            brute_force_oracle(&mm1, 8, 8, &spec),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn oracle_matches_the_solver_on_a_small_independent_instance() {
        let mm = two_risk_market(CopulaModel::Independence, 0.3, 0.5, 1.0, 4.0);
        let spec = QuadratureSpec {
            mesh_points: 32,
            truncation_prob: 1.0 - 1e-8,
            ..Default::default()
        };
        let cfg = SolverConfig {
            treaty_knots: 201,
            ..Default::default()
        };
        let (solver_s, _) = optimize(&mm, &cfg, &spec).unwrap();
        let solver_eu = treaty::expected_utility(&mm, &solver_s, &spec).unwrap();
        let (_, oracle_eu) = brute_force_oracle(&mm, 24, 32, &spec).unwrap();
        assert!(
            (solver_eu - oracle_eu).abs() <= 1e-3,
            "solver {solver_eu:.8e} vs oracle {oracle_eu:.8e}"
        );
        // the oracle cannot beat the solver by more than its own lattice bias
        assert!(oracle_eu <= solver_eu + 5e-4);
    }
}
