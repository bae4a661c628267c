//! Per-risk fixed-point solver and the cyclic treaty optimizer.
//!
//! With every other risk's treaty frozen, the optimal amount z ceded at claim
//! level x balances two marginal effects: the conditional expected marginal
//! utility of net profit (`lambda_fn`) against the marginal premium cost of
//! ceding more. Their difference (`g_fn`) is strictly decreasing in z, so the
//! optimal treaty is its root clamped to [0, x] (`solve_ceded`). Aggregating
//! the solved curve back into a marginal-utility level and premium moments
//! yields a self-map on those quantities (`upsilon`) whose fixed points are
//! per-risk optimal treaties (`newton_fixed_point`). A smooth interior
//! barrier removes the clamp's kinks so Newton steps have a Jacobian; the
//! outer loop (`optimize`) cycles through the risks with a decreasing barrier
//! schedule and exits once a full cycle stops improving expected utility.

use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use crate::copula::CopulaModel;
use crate::error::{Error, Result};
use crate::market::PremiumPrinciple;
use crate::quad::{self, QuadratureSpec};
use crate::treaty::{self, MarketModel, Strategy, TreatyCurve};

/// Joint state the per-risk subproblems exchange: the expected marginal
/// utility of net profit and, per risk, the raw moments of its ceded amount
/// up to the order its premium principle consumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentState {
    pub m0: f64,
    pub moments: Vec<Vec<f64>>,
}

impl MomentState {
    /// Shape and feasibility check against a market: positive finite m0, one
    /// moment vector per risk with the principle's arity, each realizable as
    /// the moments of a nonnegative random variable.
    pub fn validate(&self, mm: &MarketModel) -> Result<()> {
        if !self.m0.is_finite() || self.m0 <= 0.0 {
            return Err(Error::InvalidMoments(format!(
                "marginal-utility level must be positive and finite, got {}",
                self.m0
            )));
        }
        if self.moments.len() != mm.n() {
            return Err(Error::Config(format!(
                "moment state covers {} risks but the market has {}",
                self.moments.len(),
                mm.n()
            )));
        }
        for (i, mi) in self.moments.iter().enumerate() {
            let want = mm.principles[i].order();
            if mi.len() != want {
                return Err(Error::Config(format!(
                    "risk {i}: principle consumes {want} moments, state has {}",
                    mi.len()
                )));
            }
            treaty::check_moment_closure(mi)?;
        }
        Ok(())
    }
}

/// Starting treaties for the cyclic optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitTreaty {
    /// Cede everything. Net profit is then deterministic, so the first
    /// expected-utility evaluation is finite for any risk aversion.
    Full,
    /// Stop-loss at each risk's median claim.
    StopLossMedian,
}

/// Tolerances and schedules of the fixed-point solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Decreasing barrier sizes, one per outer cycle; the last one repeats.
    pub barrier_eps: Vec<f64>,
    /// Barrier singularity exponent at the clamp boundaries.
    pub barrier_alpha: f64,
    /// Sup-norm residual at which the per-risk fixed point is accepted.
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    /// Backtracking factor for Newton steps that overshoot.
    pub newton_damping: f64,
    pub newton_max_halvings: usize,
    /// Exit once one full cycle improves expected utility by less than this.
    pub outer_tol: f64,
    pub outer_max_cycles: usize,
    /// Residual tolerance of the scalar ceded solve, scaled by 1 + |m0|.
    pub root_tol: f64,
    /// Knot count of the sampled piecewise-linear treaties.
    pub treaty_knots: usize,
    /// Probability mass the treaty knot grid covers.
    pub treaty_top_prob: f64,
    pub init: InitTreaty,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            barrier_eps: vec![1e-2, 1e-3, 1e-4, 1e-5, 1e-6],
            barrier_alpha: 1.0,
            newton_tol: 1e-8,
            newton_max_iter: 50,
            newton_damping: 0.5,
            newton_max_halvings: 20,
            outer_tol: 1e-9,
            outer_max_cycles: 100,
            root_tol: 1e-12,
            treaty_knots: 401,
            treaty_top_prob: 1.0 - 1e-6,
            init: InitTreaty::Full,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.barrier_eps.is_empty() {
            return Err(Error::Config("barrier schedule is empty".into()));
        }
        for w in self.barrier_eps.windows(2) {
            if !(w[1] < w[0]) {
                return Err(Error::Config(format!(
                    "barrier schedule must decrease strictly, got {} then {}",
                    w[0], w[1]
                )));
            }
        }
        for (&e, name) in self
            .barrier_eps
            .iter()
            .zip(std::iter::repeat("barrier_eps"))
            .chain([
                (&self.barrier_alpha, "barrier_alpha"),
                (&self.newton_tol, "newton_tol"),
                (&self.outer_tol, "outer_tol"),
                (&self.root_tol, "root_tol"),
            ])
        {
            if !e.is_finite() || e <= 0.0 {
                return Err(Error::Config(format!("{name} must be positive and finite, got {e}")));
            }
        }
        if !(self.newton_damping > 0.0 && self.newton_damping < 1.0) {
            return Err(Error::Config(format!(
                "newton_damping must lie in (0, 1), got {}",
                self.newton_damping
            )));
        }
        if self.newton_max_iter == 0 || self.outer_max_cycles == 0 {
            return Err(Error::Config("iteration budgets must be at least 1".into()));
        }
        if self.treaty_knots < 2 {
            return Err(Error::Config("treaty grid needs at least 2 knots".into()));
        }
        if !(self.treaty_top_prob > 0.0 && self.treaty_top_prob < 1.0) {
            return Err(Error::Config(format!(
                "treaty_top_prob must lie in (0, 1), got {}",
                self.treaty_top_prob
            )));
        }
        Ok(())
    }
}

/// Interior barrier eps * x^(a+1)/(1+x^(a+1)) * (z^-a - (x-z)^-a) for
/// 0 < z < x: +inf as z -> 0+, -inf as z -> x-, strictly decreasing in z,
/// and vanishing uniformly on compact interior sets as eps -> 0. Added to
/// the optimality gap it pushes the root strictly inside (0, x).
pub fn barrier(eps: f64, alpha: f64, x: f64, z: f64) -> f64 {
    let xa = x.powf(alpha + 1.0);
    let w = eps * xa / (1.0 + xa);
    w * (z.powf(-alpha) - (x - z).powf(-alpha))
}

/// z-derivative of `barrier`; nonpositive everywhere on (0, x).
pub fn barrier_dz(eps: f64, alpha: f64, x: f64, z: f64) -> f64 {
    let xa = x.powf(alpha + 1.0);
    let w = eps * xa / (1.0 + xa);
    -w * alpha * (z.powf(-alpha - 1.0) + (x - z).powf(-alpha - 1.0))
}

/// Premium data of the active risk frozen at one moment vector: the premium
/// itself and its moment gradient, from which the z-sensitivities of the
/// premium under a point perturbation of the ceded curve follow.
pub(crate) struct PrincipleEval {
    pub(crate) psi: f64,
    grad: Vec<f64>,
}

impl PrincipleEval {
    pub(crate) fn new(p: &PremiumPrinciple, mi: &[f64]) -> Result<Self> {
        Ok(PrincipleEval { psi: p.premium(mi)?, grad: p.premium_gradient(mi)? })
    }

    /// S(z) = sum_r grad_r * r * z^(r-1): how fast the premium reacts when
    /// the ceded amount at one claim level moves.
    fn s(&self, z: f64) -> f64 {
        self.grad
            .iter()
            .enumerate()
            .map(|(j, g)| g * (j + 1) as f64 * z.powi(j as i32))
            .sum()
    }

    /// S'(z) = sum_{r>=2} grad_r * r * (r-1) * z^(r-2).
    fn s_prime(&self, z: f64) -> f64 {
        self.grad
            .iter()
            .enumerate()
            .skip(1)
            .map(|(j, g)| {
                let r = (j + 1) as f64;
                g * r * (r - 1.0) * z.powi(j as i32 - 1)
            })
            .sum()
    }
}

/// How the conditional marginal-utility factor is evaluated.
#[derive(Clone, Copy)]
enum Kernel {
    /// Exponential utility: the factor splits off as
    /// lambda = r * exp(-r (c - x + z)) * H(x) with H independent of z and of
    /// the active risk's state. `h_const` is Some when H does not depend on x
    /// (single risk, or independent partners).
    Expo { r: f64, h_const: Option<f64> },
    /// General concave utility: conditional expectation evaluated per call.
    General,
}

/// The partner risk of a two-risk portfolio: its quadrature nodes and its
/// premium-plus-retained contribution to net profit at each node.
struct OtherRisk {
    nodes: quad::MarginalNodes,
    contrib: Vec<f64>,
}

/// One point where the scalar equation is evaluated: claim level, its
/// marginal cdf (the copula coordinate), and the cached exponential factor.
struct Ctx {
    x: f64,
    u: f64,
    h: Option<f64>,
}

/// Everything frozen while one risk's fixed point is computed: the other
/// risks' treaties and premiums, the quadrature nodes, and the conditional
/// kernel caches.
pub(crate) struct Subproblem<'a> {
    mm: &'a MarketModel,
    i: usize,
    outer: quad::MarginalNodes,
    other: Option<OtherRisk>,
    kernel: Kernel,
    h_cache: RefCell<Vec<Option<f64>>>,
    independent: bool,
}

impl<'a> Subproblem<'a> {
    /// `others_moments` and `treaties` are full-length per-risk slices. The
    /// active risk's moment entry is ignored; its treaty entry only seeds a
    /// quadrature breakpoint at the level where ceding starts, so that near a
    /// fixed point the integrands' one kink stays resolved no matter how the
    /// panels fall.
    pub(crate) fn new(
        mm: &'a MarketModel,
        i: usize,
        others_moments: &[Vec<f64>],
        treaties: &[TreatyCurve],
        spec: &QuadratureSpec,
    ) -> Result<Self> {
        let n = mm.n();
        if i >= n {
            return Err(Error::Config(format!("risk index {i} out of range for {n} risks")));
        }
        if others_moments.len() != n || treaties.len() != n {
            return Err(Error::Config(format!(
                "expected {n} moment vectors and treaties, got {} and {}",
                others_moments.len(),
                treaties.len()
            )));
        }
        spec.validate()?;
        let independent = matches!(mm.copula, CopulaModel::Independence);
        let mut bp = Vec::new();
        for u in mm.copula.u_breakpoints() {
            if u > 0.0 && u < 1.0 {
                bp.push(mm.marginals[i].quantile(u)?);
            }
        }
        if let Some(k) = entry_kink(&treaties[i]) {
            bp.push(k);
        }
        let outer = quad::marginal_nodes(&mm.marginals[i], spec, &bp)?;

        let mut other = None;
        let kernel = match mm.utility.constant_risk_aversion() {
            Some(r) if n == 1 => Kernel::Expo { r, h_const: Some(1.0) },
            Some(r) if independent => {
                let mut h = 1.0;
                for j in (0..n).filter(|&j| j != i) {
                    let psi = mm.principles[j].premium(&others_moments[j])?;
                    let t = &treaties[j];
                    let kinks = t.breakpoints();
                    let e = quad::integrate_marginal_kinked(
                        |x| (r * (x - t.eval(x))).exp(),
                        &mm.marginals[j],
                        spec,
                        &kinks,
                    )?;
                    h *= (r * psi).exp() * e;
                }
                if !h.is_finite() || h <= 0.0 {
                    return Err(Error::Integrability(format!(
                        "partner-risk marginal-utility factor is not finite ({h})"
                    )));
                }
                Kernel::Expo { r, h_const: Some(h) }
            }
            Some(r) => {
                // Dependent markets have exactly two risks.
                other = Some(Self::other_risk(mm, i, others_moments, treaties, spec)?);
                Kernel::Expo { r, h_const: None }
            }
            None if n == 1 => Kernel::General,
            None if n == 2 => {
                other = Some(Self::other_risk(mm, i, others_moments, treaties, spec)?);
                Kernel::General
            }
            None => {
                return Err(Error::Unsupported(
                    "portfolios with three or more risks need exponential utility".into(),
                ))
            }
        };
        let h_len = outer.x.len();
        Ok(Subproblem {
            mm,
            i,
            outer,
            other,
            kernel,
            h_cache: RefCell::new(vec![None; h_len]),
            independent,
        })
    }

    fn other_risk(
        mm: &MarketModel,
        i: usize,
        others_moments: &[Vec<f64>],
        treaties: &[TreatyCurve],
        spec: &QuadratureSpec,
    ) -> Result<OtherRisk> {
        let j = 1 - i;
        let psi = mm.principles[j].premium(&others_moments[j])?;
        let rn = mm.risk_nodes(j, &treaties[j], spec)?;
        let contrib = rn.retained.iter().map(|&ret| psi + ret).collect();
        Ok(OtherRisk { nodes: rn.nodes, contrib })
    }

    fn dens(&self, u: f64, v: f64) -> f64 {
        if self.independent {
            1.0
        } else {
            quad::density_for(&self.mm.copula, self.i, u, v)
        }
    }

    /// Conditional exponential factor H at outer node `a`, cached.
    fn h_node(&self, a: usize) -> Result<f64> {
        if let Kernel::Expo { h_const: Some(h), .. } = self.kernel {
            return Ok(h);
        }
        if let Some(v) = self.h_cache.borrow()[a] {
            return Ok(v);
        }
        let v = self.h_fresh(self.outer.cdf[a])?;
        self.h_cache.borrow_mut()[a] = Some(v);
        Ok(v)
    }

    fn h_fresh(&self, u: f64) -> Result<f64> {
        let Kernel::Expo { r, .. } = self.kernel else {
            unreachable!("conditional factor is an exponential-utility construct")
        };
        let o = self.other.as_ref().expect("dependent factor needs the partner risk");
        quad::sum_nodes(&o.nodes, |b| {
            Ok(self.dens(u, o.nodes.cdf[b]) * (r * o.contrib[b]).exp())
        })
    }

    fn node_ctx(&self, a: usize) -> Result<Ctx> {
        let h = match self.kernel {
            Kernel::Expo { .. } => Some(self.h_node(a)?),
            Kernel::General => None,
        };
        Ok(Ctx { x: self.outer.x[a], u: self.outer.cdf[a], h })
    }

    fn x_ctx(&self, x: f64) -> Result<Ctx> {
        let u = self.mm.marginals[self.i].cdf(x);
        let h = match self.kernel {
            Kernel::Expo { h_const: Some(h), .. } => Some(h),
            Kernel::Expo { .. } => Some(self.h_fresh(u)?),
            Kernel::General => None,
        };
        Ok(Ctx { x, u, h })
    }

    /// Conditional expected marginal utility of net profit given the active
    /// risk's claim is ctx.x, with `zshift` already net of the premium shift.
    fn lambda_ctx(&self, ctx: &Ctx, zshift: f64) -> Result<f64> {
        match self.kernel {
            Kernel::Expo { r, .. } => {
                let h = ctx.h.expect("exponential context carries its factor");
                Ok(r * (-(r * (self.mm.c - ctx.x + zshift))).exp() * h)
            }
            Kernel::General => self.cond_uprime(ctx, zshift, false),
        }
    }

    /// z-derivative of `lambda_ctx`: the conditional expected second
    /// derivative of utility. Strictly negative.
    fn dlambda_ctx(&self, ctx: &Ctx, zshift: f64) -> Result<f64> {
        match self.kernel {
            Kernel::Expo { r, .. } => Ok(-r * self.lambda_ctx(ctx, zshift)?),
            Kernel::General => self.cond_uprime(ctx, zshift, true),
        }
    }

    fn cond_uprime(&self, ctx: &Ctx, zshift: f64, second: bool) -> Result<f64> {
        let w = self.mm.c - ctx.x + zshift;
        let u = &self.mm.utility;
        match &self.other {
            None => {
                if second {
                    u.utility_double_prime(w)
                } else {
                    u.utility_prime(w)
                }
            }
            Some(o) => quad::sum_nodes(&o.nodes, |b| {
                let t = w - o.contrib[b];
                let val = if second { u.utility_double_prime(t)? } else { u.utility_prime(t)? };
                Ok(self.dens(ctx.u, o.nodes.cdf[b]) * val)
            }),
        }
    }

    /// Optimality gap at ceded amount z, with the barrier added when eps > 0.
    fn g_ctx(&self, ctx: &Ctx, z: f64, m0: f64, pe: &PrincipleEval, eps: f64, alpha: f64) -> Result<f64> {
        let mut g = self.lambda_ctx(ctx, z - pe.psi)? - m0 * pe.s(z);
        if eps > 0.0 {
            g += barrier(eps, alpha, ctx.x, z);
        }
        Ok(g)
    }

    fn dg_ctx(&self, ctx: &Ctx, z: f64, m0: f64, pe: &PrincipleEval, eps: f64, alpha: f64) -> Result<f64> {
        let mut d = self.dlambda_ctx(ctx, z - pe.psi)? - m0 * pe.s_prime(z);
        if eps > 0.0 {
            d += barrier_dz(eps, alpha, ctx.x, z);
        }
        Ok(d)
    }

    pub(crate) fn g_at(&self, x: f64, z: f64, m0: f64, mi: &[f64], eps: f64, alpha: f64) -> Result<f64> {
        let pe = PrincipleEval::new(&self.mm.principles[self.i], mi)?;
        let ctx = self.x_ctx(x)?;
        self.g_ctx(&ctx, z, m0, &pe, eps, alpha)
    }

    pub(crate) fn lambda_at(&self, x: f64, zshift: f64) -> Result<f64> {
        let ctx = self.x_ctx(x)?;
        self.lambda_ctx(&ctx, zshift)
    }

    /// Ceded amount at claim level ctx.x. eps == 0 clamps the root of the
    /// optimality gap to [0, x]; eps > 0 solves the strictly interior
    /// barrier-smoothed root.
    fn solve_ctx(
        &self,
        ctx: &Ctx,
        m0: f64,
        pe: &PrincipleEval,
        eps: f64,
        cfg: &SolverConfig,
    ) -> Result<f64> {
        let x = ctx.x;
        if x <= 0.0 {
            return Ok(0.0);
        }
        let alpha = cfg.barrier_alpha;
        let tol = cfg.root_tol * (1.0 + m0.abs());
        let g0 = self.g_ctx(ctx, 0.0, m0, pe, 0.0, alpha)?;
        if eps <= 0.0 {
            if g0 <= 0.0 {
                return Ok(0.0);
            }
            let gx = self.g_ctx(ctx, x, m0, pe, 0.0, alpha)?;
            if gx >= 0.0 {
                return Ok(x);
            }
            return self.refine_root(ctx, m0, pe, 0.0, alpha, (0.0, x), tol);
        }

        // Bracket the interior root. The barrier dominates near both edges,
        // so climbing in geometrically from each side always brackets.
        let xa = x.powf(alpha + 1.0);
        let w = eps * xa / (1.0 + xa);
        let mut lo = if g0.is_finite() && g0 < 0.0 {
            0.5 * (w / -g0).powf(1.0 / alpha)
        } else {
            0.25 * x
        };
        if !(lo > 0.0) || lo > 0.25 * x {
            lo = 0.25 * x;
        }
        let mut tries = 0usize;
        while !(self.g_ctx(ctx, lo, m0, pe, eps, alpha)? > 0.0) {
            lo *= 0.25;
            tries += 1;
            if tries > 800 || lo <= 0.0 {
                return Err(Error::SolverStall(format!(
                    "smoothed ceded solve found no positive bracket at x = {x}"
                )));
            }
        }
        let gx = self.g_ctx(ctx, x, m0, pe, 0.0, alpha)?;
        let mut delta = if gx.is_finite() && gx > 0.0 {
            0.5 * (w / gx).powf(1.0 / alpha)
        } else {
            0.25 * x
        };
        if !(delta > 0.0) || delta > 0.25 * x {
            delta = 0.25 * x;
        }
        tries = 0;
        while !(self.g_ctx(ctx, x - delta, m0, pe, eps, alpha)? < 0.0) {
            delta *= 0.25;
            tries += 1;
            if tries > 800 || x - delta >= x {
                return Err(Error::SolverStall(format!(
                    "smoothed ceded solve found no upper bracket at x = {x}"
                )));
            }
        }
        self.refine_root(ctx, m0, pe, eps, alpha, (lo, x - delta), tol)
    }

    /// Safeguarded Newton on a bracket [lo, hi] with g(lo) > 0 > g(hi).
    /// Newton steps are accepted only while the bracket keeps halving every
    /// other iteration; otherwise the step bisects. This keeps convergence
    /// geometric even on exponentially flat flanks, where raw Newton creeps
    /// in near-constant increments.
    fn refine_root(
        &self,
        ctx: &Ctx,
        m0: f64,
        pe: &PrincipleEval,
        eps: f64,
        alpha: f64,
        (mut lo, mut hi): (f64, f64),
        tol: f64,
    ) -> Result<f64> {
        let mut z = 0.5 * (lo + hi);
        let mut width_prev2 = f64::INFINITY;
        let mut width_prev = hi - lo;
        for _ in 0..256 {
            let g = self.g_ctx(ctx, z, m0, pe, eps, alpha)?;
            if g.abs() <= tol {
                return Ok(z);
            }
            if g > 0.0 {
                lo = z;
            } else {
                hi = z;
            }
            let width = hi - lo;
            if width <= f64::EPSILON * hi {
                return Ok(0.5 * (lo + hi));
            }
            let d = self.dg_ctx(ctx, z, m0, pe, eps, alpha)?;
            let mut next = z - g / d;
            if !next.is_finite() || next <= lo || next >= hi || width > 0.5 * width_prev2 {
                next = 0.5 * (lo + hi);
            }
            width_prev2 = width_prev;
            width_prev = width;
            z = next;
        }
        Ok(0.5 * (lo + hi))
    }

    pub(crate) fn solve_at(&self, x: f64, m0: f64, pe: &PrincipleEval, eps: f64, cfg: &SolverConfig) -> Result<f64> {
        if x <= 0.0 {
            return Ok(0.0);
        }
        let ctx = self.x_ctx(x)?;
        self.solve_ctx(&ctx, m0, pe, eps, cfg)
    }

    fn z_node(
        &self,
        memo: &RefCell<Vec<Option<f64>>>,
        a: usize,
        m0: f64,
        pe: &PrincipleEval,
        eps: f64,
        cfg: &SolverConfig,
    ) -> Result<f64> {
        if let Some(v) = memo.borrow()[a] {
            return Ok(v);
        }
        let ctx = self.node_ctx(a)?;
        let z = self.solve_ctx(&ctx, m0, pe, eps, cfg)?;
        memo.borrow_mut()[a] = Some(z);
        Ok(z)
    }

    /// The self-map: solve the ceded curve under (m0, mi), return its
    /// aggregated marginal-utility level and ceded moments.
    pub(crate) fn upsilon_eval(
        &self,
        m0: f64,
        mi: &[f64],
        eps: f64,
        cfg: &SolverConfig,
    ) -> Result<(f64, Vec<f64>)> {
        let pe = PrincipleEval::new(&self.mm.principles[self.i], mi)?;
        let memo = RefCell::new(vec![None; self.outer.x.len()]);
        let m0p = quad::sum_nodes(&self.outer, |a| {
            let z = self.z_node(&memo, a, m0, &pe, eps, cfg)?;
            let ctx = self.node_ctx(a)?;
            self.lambda_ctx(&ctx, z - pe.psi)
        })?;
        let mut mip = Vec::with_capacity(mi.len());
        for r in 1..=mi.len() {
            mip.push(quad::sum_nodes(&self.outer, |a| {
                Ok(self.z_node(&memo, a, m0, &pe, eps, cfg)?.powi(r as i32))
            })?);
        }
        if !m0p.is_finite() || m0p <= 0.0 {
            return Err(Error::Integrability(format!(
                "aggregated marginal-utility level is not positive and finite ({m0p})"
            )));
        }
        treaty::check_moment_closure(&mip)?;
        Ok((m0p, mip))
    }

    /// Analytic Jacobian of the self-map at (m0, mi). Differentiating the
    /// root condition g + barrier = 0 in the state gives the root's
    /// sensitivities, which the aggregation integrals then average. Without a
    /// barrier the map is differentiable wherever no quadrature node sits
    /// exactly on the free boundary: clamped nodes hold their ceded amount
    /// fixed under state perturbations, so only the premium shift survives in
    /// their level-row contribution.
    pub(crate) fn jacobian_eval(
        &self,
        m0: f64,
        mi: &[f64],
        eps: f64,
        cfg: &SolverConfig,
    ) -> Result<Vec<Vec<f64>>> {
        let p = &self.mm.principles[self.i];
        let pe = PrincipleEval::new(p, mi)?;
        let hess = p.premium_hessian(mi)?;
        let alpha = cfg.barrier_alpha;
        let k = mi.len();
        // Premium-gradient response to the root moving: d(grad_l . m)/dz under
        // a point perturbation, per column l.
        let h_l = |l: usize, z: f64| -> f64 {
            (0..k)
                .map(|r| hess[l][r] * (r + 1) as f64 * z.powi(r as i32))
                .sum()
        };
        // Per-node root, conditional second derivative, and the reciprocal of
        // the implicit denominator d(g + barrier)/dz, all memoized across
        // matrix entries. Clamped nodes carry a zero reciprocal: their root
        // does not move with the state.
        let memo: RefCell<Vec<Option<(f64, f64, f64)>>> = RefCell::new(vec![None; self.outer.x.len()]);
        let piece = |a: usize| -> Result<(f64, f64, f64)> {
            if let Some(v) = memo.borrow()[a] {
                return Ok(v);
            }
            let ctx = self.node_ctx(a)?;
            let z = self.solve_ctx(&ctx, m0, &pe, eps, cfg)?;
            let dl = self.dlambda_ctx(&ctx, z - pe.psi)?;
            let sens = if z > 0.0 && z < ctx.x {
                let denom = dl - m0 * pe.s_prime(z)
                    + if eps > 0.0 { barrier_dz(eps, alpha, ctx.x, z) } else { 0.0 };
                1.0 / denom
            } else {
                0.0
            };
            let v = (z, dl, sens);
            memo.borrow_mut()[a] = Some(v);
            Ok(v)
        };
        let dim = 1 + k;
        let mut jac = vec![vec![0.0; dim]; dim];
        jac[0][0] = quad::sum_nodes(&self.outer, |a| {
            let (z, dl, sens) = piece(a)?;
            Ok(dl * (pe.s(z) * sens))
        })?;
        for l in 1..=k {
            jac[0][l] = quad::sum_nodes(&self.outer, |a| {
                let (z, dl, sens) = piece(a)?;
                let dzl = (dl * pe.grad[l - 1] + m0 * h_l(l - 1, z)) * sens;
                Ok(dl * (dzl - pe.grad[l - 1]))
            })?;
        }
        for r in 1..=k {
            jac[r][0] = quad::sum_nodes(&self.outer, |a| {
                let (z, _, sens) = piece(a)?;
                Ok(r as f64 * z.powi(r as i32 - 1) * (pe.s(z) * sens))
            })?;
            for l in 1..=k {
                jac[r][l] = quad::sum_nodes(&self.outer, |a| {
                    let (z, dl, sens) = piece(a)?;
                    let dzl = (dl * pe.grad[l - 1] + m0 * h_l(l - 1, z)) * sens;
                    Ok(r as f64 * z.powi(r as i32 - 1) * dzl)
                })?;
            }
        }
        for row in &jac {
            for &v in row {
                if !v.is_finite() {
                    return Err(Error::Quadrature("Jacobian entry is not finite".into()));
                }
            }
        }
        Ok(jac)
    }

    fn residual(&self, v: &[f64], eps: f64, cfg: &SolverConfig) -> Result<(Vec<f64>, f64)> {
        let (m0p, mip) = self.upsilon_eval(v[0], &v[1..], eps, cfg)?;
        let mut fv = Vec::with_capacity(v.len());
        fv.push(m0p - v[0]);
        for (j, m) in mip.iter().enumerate() {
            fv.push(m - v[1 + j]);
        }
        let res = fv.iter().fold(0.0f64, |acc, b| acc.max(b.abs()));
        Ok((fv, res))
    }

    /// Damped Newton on the fixed-point residual, falling back to damped
    /// direct iteration when steps stop helping.
    fn newton(&self, m0: f64, mi: &[f64], eps: f64, cfg: &SolverConfig) -> Result<FixedPoint> {
        let p = &self.mm.principles[self.i];
        let mut v: Vec<f64> = std::iter::once(m0).chain(mi.iter().copied()).collect();
        if !state_valid(p, &v) {
            return Err(Error::InvalidMoments(format!(
                "fixed-point start is infeasible for risk {}: {v:?}",
                self.i
            )));
        }
        let (mut fv, mut res) = self.residual(&v, eps, cfg)?;
        let mut iters = 0usize;
        while res > cfg.newton_tol && iters < cfg.newton_max_iter {
            iters += 1;
            let jac = self.jacobian_eval(v[0], &v[1..], eps, cfg)?;
            let dim = v.len();
            let mut a = jac;
            for (r, row) in a.iter_mut().enumerate() {
                row[r] -= 1.0;
            }
            let rhs: Vec<f64> = fv.iter().map(|f| -f).collect();
            let Some(delta) = solve_linear(a, rhs) else {
                break;
            };
            debug_assert_eq!(delta.len(), dim);
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..=cfg.newton_max_halvings {
                let cand: Vec<f64> = v.iter().zip(&delta).map(|(vi, di)| vi + t * di).collect();
                if state_valid(p, &cand) {
                    if let Ok((cfv, cres)) = self.residual(&cand, eps, cfg) {
                        if cres < res {
                            v = cand;
                            fv = cfv;
                            res = cres;
                            accepted = true;
                            break;
                        }
                    }
                }
                t *= cfg.newton_damping;
            }
            if !accepted {
                break;
            }
        }
        let mut fallback = 0usize;
        if res > cfg.newton_tol {
            let cap = cfg.newton_max_iter * 10;
            'outer: while res > cfg.newton_tol && fallback < cap {
                fallback += 1;
                let mut tau = 0.5;
                for _ in 0..=cfg.newton_max_halvings {
                    let cand: Vec<f64> = v.iter().zip(&fv).map(|(vi, fi)| vi + tau * fi).collect();
                    if state_valid(p, &cand) {
                        if let Ok((cfv, cres)) = self.residual(&cand, eps, cfg) {
                            v = cand;
                            fv = cfv;
                            res = cres;
                            continue 'outer;
                        }
                    }
                    tau *= 0.5;
                }
                break;
            }
        }
        if res > cfg.newton_tol {
            return Err(Error::SolverStall(format!(
                "risk {}: Newton spent {iters} iterations and damped iteration {fallback} more, residual {res:.3e} > {:.3e}",
                self.i, cfg.newton_tol
            )));
        }
        let treaty = self.sample_treaty(v[0], &v[1..], eps, cfg)?;
        Ok(FixedPoint {
            m0: v[0],
            moments: v[1..].to_vec(),
            treaty,
            newton_iterations: iters,
            fallback_iterations: fallback,
            residual: res,
        })
    }

    /// Sample the ceded curve induced by (m0, mi) on the treaty knot grid.
    pub(crate) fn sample_treaty(&self, m0: f64, mi: &[f64], eps: f64, cfg: &SolverConfig) -> Result<TreatyCurve> {
        let pe = PrincipleEval::new(&self.mm.principles[self.i], mi)?;
        let mut grid = treaty::knot_grid(&self.mm.marginals[self.i], cfg.treaty_knots, cfg.treaty_top_prob)?;
        // Extra knots at the curve's non-smooth claim levels. The clamped
        // free boundary is its sharpest feature: without a knot there the
        // sampled curve's moments wobble as the boundary drifts across the
        // fixed grid from state to state, and that wobble is visible in
        // premiums priced off the samples.
        let mut extra = Vec::new();
        if let Some(x0) = self.free_boundary(m0, &pe, cfg)? {
            extra.push(x0);
        }
        // Where the copula's cells end the conditional kernel jumps, and the
        // solved curve jumps with it. A straddling knot pair confines the
        // jump to a vanishing span instead of smearing it over a whole knot
        // gap, which would bias the sampled moments and the repriced level.
        for u in self.mm.copula.u_breakpoints() {
            let xb = self.mm.marginals[self.i].quantile(u)?;
            let d = 1e-9 * (1.0 + xb);
            extra.push(xb - d);
            extra.push(xb + d);
        }
        let top = *grid.last().expect("knot grid is nonempty");
        for x0 in extra {
            if !(x0 > 0.0 && x0 < top) {
                continue;
            }
            let pos = grid.partition_point(|&g| g < x0);
            let sep = 2.5e-10 * (1.0 + x0);
            if grid[pos] - x0 > sep && x0 - grid[pos - 1] > sep {
                grid.insert(pos, x0);
            }
        }
        let mut zs = Vec::with_capacity(grid.len());
        for &x in &grid {
            zs.push(self.solve_at(x, m0, &pe, eps, cfg)?);
        }
        TreatyCurve::from_samples(grid, zs)
    }

    /// The claim level where the clamped solve starts ceding: the zero of the
    /// optimality gap at z = 0, which grows with the claim size. None when
    /// the gap keeps one sign across the sampled support (ceding everywhere
    /// or nowhere).
    fn free_boundary(&self, m0: f64, pe: &PrincipleEval, cfg: &SolverConfig) -> Result<Option<f64>> {
        let alpha = cfg.barrier_alpha;
        let top = self.mm.marginals[self.i].quantile(cfg.treaty_top_prob)?;
        let gap = |x: f64| -> Result<f64> {
            let ctx = self.x_ctx(x)?;
            self.g_ctx(&ctx, 0.0, m0, pe, 0.0, alpha)
        };
        let (mut lo, mut hi) = (0.0, top);
        if gap(lo)? >= 0.0 || gap(hi)? <= 0.0 {
            return Ok(None);
        }
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if gap(mid)? > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
            if hi - lo <= 1e-13 * (1.0 + hi) {
                break;
            }
        }
        Ok(Some(0.5 * (lo + hi)))
    }
}

/// The claim level where a treaty starts ceding: zero below, positive above.
/// That level is the one interior point where the subproblem integrands lose
/// smoothness, so the quadrature pins a panel edge there. None when the curve
/// cedes from the origin or not at all.
fn entry_kink(t: &TreatyCurve) -> Option<f64> {
    match t {
        TreatyCurve::StopLoss { retention } if *retention > 0.0 => Some(*retention),
        TreatyCurve::PiecewiseLinear { x, z } => {
            let k = z.iter().position(|&v| v > 0.0)?;
            if k == 0 {
                return None;
            }
            // Back-cast the next segment to its zero crossing: for a curve
            // that kinks between samples this lands on the true boundary.
            let slope = if k + 1 < x.len() && x[k + 1] > x[k] {
                (z[k + 1] - z[k]) / (x[k + 1] - x[k])
            } else {
                0.0
            };
            let est = if slope > 1e-9 { x[k] - z[k] / slope } else { x[k - 1] };
            Some(est.clamp(x[k - 1], x[k]))
        }
        _ => None,
    }
}

/// True when (m0, mi) is a usable solver state: positive finite level,
/// realizable moments, and a premium the principle can differentiate there.
fn state_valid(p: &PremiumPrinciple, v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
        && v[0] > 0.0
        && treaty::check_moment_closure(&v[1..]).is_ok()
        && PrincipleEval::new(p, &v[1..]).is_ok()
}

/// Gaussian elimination with partial pivoting; None when singular.
fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for c in 0..n {
        let piv = (c..n).max_by(|&r, &s| a[r][c].abs().total_cmp(&a[s][c].abs()))?;
        if a[piv][c].abs() < 1e-13 {
            return None;
        }
        a.swap(c, piv);
        b.swap(c, piv);
        for r in (c + 1)..n {
            let f = a[r][c] / a[c][c];
            if f != 0.0 {
                for cc in c..n {
                    a[r][cc] -= f * a[c][cc];
                }
                b[r] -= f * b[c];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let mut s = b[r];
        for c in (r + 1)..n {
            s -= a[r][c] * x[c];
        }
        x[r] = s / a[r][r];
        if !x[r].is_finite() {
            return None;
        }
    }
    Some(x)
}

/// Conditional expected marginal utility of net profit given X_i = x when
/// risk i additionally cedes z: the benefit side of the optimality gap.
/// `others_moments` and `z_others` are full-length slices; entry i is unused.
pub fn lambda_fn(
    mm: &MarketModel,
    i: usize,
    others_moments: &[Vec<f64>],
    z_others: &[TreatyCurve],
    x: f64,
    z: f64,
    spec: &QuadratureSpec,
) -> Result<f64> {
    let sp = Subproblem::new(mm, i, others_moments, z_others, spec)?;
    sp.lambda_at(x, z)
}

/// Optimality gap at ceded amount z: marginal benefit of ceding more minus
/// its marginal premium cost m0 * S(z). Strictly decreasing in z.
pub fn g_fn(
    mm: &MarketModel,
    i: usize,
    m: &MomentState,
    z_others: &[TreatyCurve],
    x: f64,
    z: f64,
    spec: &QuadratureSpec,
) -> Result<f64> {
    let sp = Subproblem::new(mm, i, &m.moments, z_others, spec)?;
    sp.g_at(x, z, m.m0, &m.moments[i], 0.0, 1.0)
}

/// Ceded amount at claim level x under state m. eps == 0 gives the clamped
/// root in [0, x]; eps > 0 the strictly interior barrier-smoothed root.
pub fn solve_ceded(
    mm: &MarketModel,
    i: usize,
    m: &MomentState,
    z_others: &[TreatyCurve],
    x: f64,
    eps: f64,
    cfg: &SolverConfig,
    spec: &QuadratureSpec,
) -> Result<f64> {
    cfg.validate()?;
    let sp = Subproblem::new(mm, i, &m.moments, z_others, spec)?;
    let pe = PrincipleEval::new(&mm.principles[i], &m.moments[i])?;
    sp.solve_at(x, m.m0, &pe, eps, cfg)
}

/// One application of risk i's self-map at (m0, m_i), the other risks frozen
/// at `others_moments` / `z_others`.
pub fn upsilon(
    mm: &MarketModel,
    i: usize,
    m0: f64,
    m_i: &[f64],
    others_moments: &[Vec<f64>],
    z_others: &[TreatyCurve],
    eps: f64,
    cfg: &SolverConfig,
    spec: &QuadratureSpec,
) -> Result<(f64, Vec<f64>)> {
    cfg.validate()?;
    let sp = Subproblem::new(mm, i, others_moments, z_others, spec)?;
    sp.upsilon_eval(m0, m_i, eps, cfg)
}

/// Jacobian of the self-map at (m0, m_i); rows and columns are ordered
/// (m0, m_1, ..., m_k). At eps = 0 this is the derivative of the clamped
/// map, defined wherever no quadrature node sits on the free boundary.
pub fn upsilon_jacobian(
    mm: &MarketModel,
    i: usize,
    m0: f64,
    m_i: &[f64],
    others_moments: &[Vec<f64>],
    z_others: &[TreatyCurve],
    eps: f64,
    cfg: &SolverConfig,
    spec: &QuadratureSpec,
) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let sp = Subproblem::new(mm, i, others_moments, z_others, spec)?;
    sp.jacobian_eval(m0, m_i, eps, cfg)
}

/// Converged per-risk fixed point and the treaty it induces.
#[derive(Debug, Clone)]
pub struct FixedPoint {
    pub m0: f64,
    pub moments: Vec<f64>,
    pub treaty: TreatyCurve,
    pub newton_iterations: usize,
    pub fallback_iterations: usize,
    pub residual: f64,
}

/// Solve risk i's fixed point at barrier size eps >= 0, starting from
/// (m0, m_i). Newton steps solve (J - I) delta = -(upsilon(m) - m) with
/// backtracking; if they stall, damped direct iteration
/// m <- m + tau (upsilon(m) - m) takes over. eps = 0 solves the clamped
/// problem directly and is intended for polishing a smoothed answer; cold
/// starts should anneal through positive barrier sizes instead.
pub fn newton_fixed_point(
    mm: &MarketModel,
    i: usize,
    m0: f64,
    m_i: &[f64],
    others_moments: &[Vec<f64>],
    z_others: &[TreatyCurve],
    eps: f64,
    cfg: &SolverConfig,
    spec: &QuadratureSpec,
) -> Result<FixedPoint> {
    cfg.validate()?;
    let sp = Subproblem::new(mm, i, others_moments, z_others, spec)?;
    sp.newton(m0, m_i, eps, cfg)
}

/// Sup distance between the smoothed and the clamped ceded solves over a
/// claim grid, everything else frozen at state m.
pub fn smoothing_gap(
    mm: &MarketModel,
    i: usize,
    m: &MomentState,
    z_others: &[TreatyCurve],
    grid: &[f64],
    eps: f64,
    cfg: &SolverConfig,
    spec: &QuadratureSpec,
) -> Result<f64> {
    cfg.validate()?;
    let sp = Subproblem::new(mm, i, &m.moments, z_others, spec)?;
    let pe = PrincipleEval::new(&mm.principles[i], &m.moments[i])?;
    let mut sup = 0.0f64;
    for &x in grid {
        let ze = sp.solve_at(x, m.m0, &pe, eps, cfg)?;
        let z0 = sp.solve_at(x, m.m0, &pe, 0.0, cfg)?;
        sup = sup.max((ze - z0).abs());
    }
    Ok(sup)
}

/// Expected marginal utility of net profit under a strategy: the quantity
/// the solver tracks as m0.
pub fn expected_marginal_utility(mm: &MarketModel, s: &Strategy, spec: &QuadratureSpec) -> Result<f64> {
    if let Some(r) = mm.utility.constant_risk_aversion() {
        return Ok(-r * treaty::expected_utility(mm, s, spec)?);
    }
    if s.treaties.len() != mm.n() || s.premiums.len() != mm.n() {
        return Err(Error::Config("strategy arity does not match the market".into()));
    }
    let w0 = mm.c - s.premiums.iter().sum::<f64>();
    if s.treaties.iter().all(|t| matches!(t, TreatyCurve::Full)) {
        return mm.utility.utility_prime(w0);
    }
    match mm.n() {
        1 => {
            let t = &s.treaties[0];
            let kinks = t.breakpoints();
            quad::integrate_marginal_try(
                |x| mm.utility.utility_prime(w0 - (x - t.eval(x))),
                &mm.marginals[0],
                spec,
                &kinks,
            )
        }
        2 => {
            let ra = mm.risk_nodes(0, &s.treaties[0], spec)?;
            let rb = mm.risk_nodes(1, &s.treaties[1], spec)?;
            let independent = matches!(mm.copula, CopulaModel::Independence);
            quad::sum_nodes(&ra.nodes, |a| {
                let ua = ra.nodes.cdf[a];
                let reta = ra.retained[a];
                quad::sum_nodes(&rb.nodes, |b| {
                    let dens = if independent {
                        1.0
                    } else {
                        mm.copula.density(ua, rb.nodes.cdf[b])
                    };
                    Ok(dens * mm.utility.utility_prime(w0 - reta - rb.retained[b])?)
                })
            })
        }
        _ => Err(Error::Unsupported(
            "expected marginal utility with three or more risks needs exponential utility".into(),
        )),
    }
}

/// One completed pass over all risks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cycle: usize,
    pub eps: f64,
    pub expected_utility: f64,
    /// Gain over the previous cycle's expected utility.
    pub improvement: f64,
    pub m0: f64,
    pub premiums: Vec<f64>,
    pub newton_iterations: Vec<usize>,
    pub residuals: Vec<f64>,
}

/// Outcome of the cyclic optimizer, with per-cycle trace for reporting.
/// `fixed_point_*` is the converged state after the clamped polish, i.e. a
/// fixed point of the barrier-free maps; `final_*` values are recomputed from
/// the clamped resampled treaties so the shipped curves, moments, and
/// premiums agree with each other.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub converged: bool,
    pub cycles_used: usize,
    pub initial_expected_utility: f64,
    pub final_expected_utility: f64,
    pub final_m0: f64,
    pub final_moments: Vec<Vec<f64>>,
    pub final_premiums: Vec<f64>,
    pub fixed_point_m0: f64,
    pub fixed_point_moments: Vec<Vec<f64>>,
    pub total_newton_iterations: usize,
    pub eps_final: f64,
    pub cycles: Vec<CycleRecord>,
}

fn attach_context(e: Error, cycle: usize, risk: Option<usize>) -> Error {
    let tag = match risk {
        Some(j) => format!("cycle {cycle}, risk {j}"),
        None => format!("cycle {cycle}"),
    };
    match e {
        Error::Unsupported(s) => Error::Unsupported(format!("{tag}: {s}")),
        Error::InfiniteSupport(s) => Error::InfiniteSupport(format!("{tag}: {s}")),
        Error::Domain(s) => Error::Domain(format!("{tag}: {s}")),
        Error::InvalidMoments(s) => Error::InvalidMoments(format!("{tag}: {s}")),
        Error::Quadrature(s) => Error::Quadrature(format!("{tag}: {s}")),
        Error::Integrability(s) => Error::Integrability(format!("{tag}: {s}")),
        Error::SolverStall(s) => Error::SolverStall(format!("{tag}: {s}")),
        Error::Config(s) => Error::Config(format!("{tag}: {s}")),
        Error::Refused(s) => Error::Refused(format!("{tag}: {s}")),
        Error::Io(e) => Error::Io(e),
    }
}

/// Full portfolio optimization: cycle through the risks, solving each one's
/// fixed point with the others frozen, shrinking the barrier along the
/// schedule, until a complete cycle improves expected utility by less than
/// `outer_tol` at the final barrier size. The converged state is then
/// polished against the clamped (barrier-free) maps to shed the residual
/// smoothing bias, and the returned strategy carries the clamped treaties
/// resampled from that state, priced from their own moments so curve,
/// moments, and premiums agree.
pub fn optimize(mm: &MarketModel, cfg: &SolverConfig, spec: &QuadratureSpec) -> Result<(Strategy, SolveReport)> {
    cfg.validate()?;
    spec.validate()?;
    if mm.marginals.iter().any(|m| matches!(m, crate::dist::MarginalModel::Empirical { .. })) {
        return Err(Error::Unsupported(
            "the cyclic optimizer needs atomless marginals; empirical ones have atoms".into(),
        ));
    }
    if mm.n() > 2 && mm.utility.constant_risk_aversion().is_none() {
        return Err(Error::Unsupported(
            "portfolios with three or more risks need exponential utility".into(),
        ));
    }
    let n = mm.n();
    let init: Vec<TreatyCurve> = match cfg.init {
        InitTreaty::Full => vec![TreatyCurve::Full; n],
        InitTreaty::StopLossMedian => {
            let mut v = Vec::with_capacity(n);
            for m in &mm.marginals {
                v.push(TreatyCurve::StopLoss { retention: m.quantile(0.5)? });
            }
            v
        }
    };
    let mut strat = Strategy::priced(init, mm, spec)?;
    let mut state = MomentState {
        m0: expected_marginal_utility(mm, &strat, spec)?,
        moments: {
            let mut v = Vec::with_capacity(n);
            for j in 0..n {
                v.push(strat.treaties[j].moments(
                    &mm.marginals[j],
                    mm.principles[j].order() as u32,
                    spec,
                )?);
            }
            v
        },
    };
    state.validate(mm)?;
    let initial_eu = treaty::expected_utility(mm, &strat, spec)?;
    let mut eu = initial_eu;
    let last_eps = *cfg.barrier_eps.last().expect("validated nonempty");
    let mut cycles: Vec<CycleRecord> = Vec::new();
    let mut total_newton = 0usize;
    let mut converged = false;
    for cycle in 1..=cfg.outer_max_cycles {
        let eps = cfg.barrier_eps[(cycle - 1).min(cfg.barrier_eps.len() - 1)];
        let mut iters = Vec::with_capacity(n);
        let mut residuals = Vec::with_capacity(n);
        for j in 0..n {
            let fp = newton_fixed_point(
                mm,
                j,
                state.m0,
                &state.moments[j],
                &state.moments,
                &strat.treaties,
                eps,
                cfg,
                spec,
            )
            .map_err(|e| attach_context(e, cycle, Some(j)))?;
            state.m0 = fp.m0;
            // Price the held curve from its own sampled moments, exactly as
            // the shipped artifacts are priced: a premium computed from the
            // state's quadrature moments would drift against the curve as
            // the free boundary moves, putting noise into the per-cycle
            // expected-utility record.
            let sampled = fp
                .treaty
                .moments(&mm.marginals[j], mm.principles[j].order() as u32, spec)
                .map_err(|e| attach_context(e, cycle, Some(j)))?;
            strat.premiums[j] = mm.principles[j]
                .premium(&sampled)
                .map_err(|e| attach_context(e, cycle, Some(j)))?;
            state.moments[j] = fp.moments;
            strat.treaties[j] = fp.treaty;
            total_newton += fp.newton_iterations + fp.fallback_iterations;
            iters.push(fp.newton_iterations);
            residuals.push(fp.residual);
        }
        let new_eu =
            treaty::expected_utility(mm, &strat, spec).map_err(|e| attach_context(e, cycle, None))?;
        let improvement = new_eu - eu;
        cycles.push(CycleRecord {
            cycle,
            eps,
            expected_utility: new_eu,
            improvement,
            m0: state.m0,
            premiums: strat.premiums.clone(),
            newton_iterations: iters,
            residuals,
        });
        eu = new_eu;
        if eps == last_eps && improvement < cfg.outer_tol {
            converged = true;
            break;
        }
    }
    if !converged {
        let last = cycles.last().map(|c| c.improvement).unwrap_or(f64::NAN);
        return Err(Error::SolverStall(format!(
            "no convergence within {} cycles; the last cycle still improved expected utility by {last:.3e}",
            cfg.outer_max_cycles
        )));
    }
    // The smoothed fixed point carries a barrier bias on the order of the
    // boundary-layer width. Polish the state against the clamped maps before
    // sampling the final curves; refinement is best effort, so a failure
    // keeps the smoothed answer.
    polish_state(mm, cfg, spec, &mut state, &mut strat);
    // Replace the barrier-smoothed curves by the clamped ones at the
    // converged state, computed against the polished strategy so no risk sees
    // a partially updated portfolio.
    let mut clamped = Vec::with_capacity(n);
    for j in 0..n {
        let sp = Subproblem::new(mm, j, &state.moments, &strat.treaties, spec)?;
        clamped.push(sp.sample_treaty(state.m0, &state.moments[j], 0.0, cfg)?);
    }
    let strat = Strategy::priced(clamped, mm, spec)?;
    let final_eu = treaty::expected_utility(mm, &strat, spec)?;
    let final_m0 = expected_marginal_utility(mm, &strat, spec)?;
    let mut final_moments = Vec::with_capacity(n);
    for j in 0..n {
        final_moments.push(strat.treaties[j].moments(
            &mm.marginals[j],
            mm.principles[j].order() as u32,
            spec,
        )?);
    }
    let report = SolveReport {
        converged: true,
        cycles_used: cycles.len(),
        initial_expected_utility: initial_eu,
        final_expected_utility: final_eu,
        final_m0,
        final_moments,
        final_premiums: strat.premiums.clone(),
        fixed_point_m0: state.m0,
        fixed_point_moments: state.moments,
        total_newton_iterations: total_newton,
        eps_final: last_eps,
        cycles,
    };
    Ok((strat, report))
}

/// Best-effort refinement of a smoothed fixed point against the clamped
/// (barrier-free) maps. On any evaluation failure the entry state is
/// restored, so callers always continue with a usable answer.
fn polish_state(
    mm: &MarketModel,
    cfg: &SolverConfig,
    spec: &QuadratureSpec,
    state: &mut MomentState,
    strat: &mut Strategy,
) {
    let snapshot = (state.clone(), strat.clone());
    if try_polish(mm, cfg, spec, state, strat).is_err() {
        *state = snapshot.0;
        *strat = snapshot.1;
    }
}

/// Cyclic per-risk Newton against the clamped maps. Substitution iterations
/// are useless here: near a flat optimum (tiny loading) the self-map's
/// linearization is a near-pure rotation, so only Newton's quadratic local
/// convergence closes the barrier bias in a handful of steps. The tolerance
/// is also far below the smoothed loop's: a residual r left in the state
/// shifts a flat optimum's retention by roughly r over the utility gain's
/// curvature, so flat problems need residuals near the quadrature floor.
/// Steps that stop helping keep the best state seen rather than failing.
fn try_polish(
    mm: &MarketModel,
    cfg: &SolverConfig,
    spec: &QuadratureSpec,
    state: &mut MomentState,
    strat: &mut Strategy,
) -> Result<()> {
    let n = mm.n();
    let tol = cfg.newton_tol.min(1e-11);
    for _ in 0..12 {
        let mut moved = 0.0f64;
        for j in 0..n {
            let sp = Subproblem::new(mm, j, &state.moments, &strat.treaties, spec)?;
            let p = &mm.principles[j];
            let mut v: Vec<f64> = std::iter::once(state.m0)
                .chain(state.moments[j].iter().copied())
                .collect();
            let entry = v.clone();
            let (mut fv, mut res) = sp.residual(&v, 0.0, cfg)?;
            let mut best = (v.clone(), res);
            for _ in 0..cfg.newton_max_iter {
                if res <= tol {
                    break;
                }
                let jac = sp.jacobian_eval(v[0], &v[1..], 0.0, cfg)?;
                let dim = v.len();
                let mut a = vec![vec![0.0; dim]; dim];
                for r in 0..dim {
                    for c in 0..dim {
                        a[r][c] = jac[r][c] - if r == c { 1.0 } else { 0.0 };
                    }
                }
                let rhs: Vec<f64> = fv.iter().map(|b| -b).collect();
                let Some(step) = solve_linear(a, rhs) else { break };
                let mut accepted = false;
                let mut scale = 1.0;
                for _ in 0..=cfg.newton_max_halvings {
                    let cand: Vec<f64> =
                        v.iter().zip(&step).map(|(a, s)| a + scale * s).collect();
                    if state_valid(p, &cand) {
                        if let Ok((cfv, cres)) = sp.residual(&cand, 0.0, cfg) {
                            if cres < res {
                                v = cand;
                                fv = cfv;
                                res = cres;
                                accepted = true;
                                break;
                            }
                        }
                    }
                    scale *= 0.5;
                }
                if !accepted {
                    break;
                }
                if res < best.1 {
                    best = (v.clone(), res);
                }
            }
            let (bv, _) = best;
            moved = moved.max((bv[0] - entry[0]).abs());
            for (a, b) in bv[1..].iter().zip(&entry[1..]) {
                moved = moved.max((a - b).abs());
            }
            state.m0 = bv[0];
            state.moments[j] = bv[1..].to_vec();
            strat.treaties[j] = sp.sample_treaty(bv[0], &bv[1..], 0.0, cfg)?;
            strat.premiums[j] = p.premium(&state.moments[j])?;
        }
        // Each risk ends at its own clamped fixed point; once a full pass
        // stops moving the state, the joint system is settled.
        if moved <= cfg.newton_tol {
            return Ok(());
        }
    }
    Ok(())
}
