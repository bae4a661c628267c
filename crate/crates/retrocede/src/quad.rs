//! Quadrature against claim marginals and conditional expectations under the
//! portfolio copula. Composite Gauss-Legendre panels cover the truncated
//! support, with panel edges at integrand kinks and a geometric tail
//! extension that both captures exponentially-dominated integrands and
//! detects divergent ones (growing tail blocks).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::copula::CopulaModel;
use crate::dist::MarginalModel;
use crate::error::{Error, Result};
use crate::treaty::MarketModel;

/// Node and sample budgets for all integrations.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadratureSpec {
    /// Gauss-Legendre panel count over the truncated support.
    pub mesh_points: usize,
    /// Monte Carlo sample count for the sampling path.
    pub mc_samples: usize,
    /// Seed for every stochastic path; identical spec means identical output.
    pub rng_seed: u64,
    /// Mass covered by the core integration domain [0, quantile(p)].
    pub truncation_prob: f64,
    /// Route conditional expectations through Monte Carlo instead of the mesh.
    pub prefer_monte_carlo: bool,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec {
            mesh_points: 256,
            mc_samples: 20_000,
            rng_seed: 7,
            truncation_prob: 1.0 - 1e-10,
            prefer_monte_carlo: false,
        }
    }
}

impl QuadratureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.mesh_points < 16 {
            return Err(Error::Config(format!(
                "mesh_points must be at least 16, got {}",
                self.mesh_points
            )));
        }
        if self.mc_samples < 16 {
            return Err(Error::Config(format!(
                "mc_samples must be at least 16, got {}",
                self.mc_samples
            )));
        }
        if !(self.truncation_prob > 0.9 && self.truncation_prob < 1.0) {
            return Err(Error::Config(format!(
                "truncation_prob must lie in (0.9, 1), got {}",
                self.truncation_prob
            )));
        }
        Ok(())
    }
}

/// Order-8 Gauss-Legendre nodes and weights on [-1, 1], computed once by
/// Newton iteration on the Legendre polynomial.
pub(crate) fn gauss_legendre_8() -> &'static ([f64; 8], [f64; 8]) {
    use std::sync::OnceLock;
    static CELL: OnceLock<([f64; 8], [f64; 8])> = OnceLock::new();
    CELL.get_or_init(|| {
        let n = 8usize;
        let mut nodes = [0.0; 8];
        let mut weights = [0.0; 8];
        for k in 0..n {
            // Chebyshev initial guess, then Newton on P_n
            let mut x = (std::f64::consts::PI * (k as f64 + 0.75) / (n as f64 + 0.5)).cos();
            for _ in 0..100 {
                // evaluate P_n and P_n' by the three-term recurrence
                let (mut p0, mut p1) = (1.0f64, x);
                for j in 2..=n {
                    let jf = j as f64;
                    let p2 = ((2.0 * jf - 1.0) * x * p1 - (jf - 1.0) * p0) / jf;
                    p0 = p1;
                    p1 = p2;
                }
                let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let step = p1 / dp;
                x -= step;
                if step.abs() < 1e-16 {
                    break;
                }
            }
            let (mut p0, mut p1) = (1.0f64, x);
            for j in 2..=n {
                let jf = j as f64;
                let p2 = ((2.0 * jf - 1.0) * x * p1 - (jf - 1.0) * p0) / jf;
                p0 = p1;
                p1 = p2;
            }
            let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            nodes[n - 1 - k] = x;
            weights[n - 1 - k] = 2.0 / ((1.0 - x * x) * dp * dp);
        }
        (nodes, weights)
    })
}

/// Density-weighted nodes for one marginal: sum(w_k f(x_k)) approximates
/// E f(X) over the truncated-plus-extended support. `cdf` caches F(x_k) for
/// copula weighting, `block_sums` boundaries let callers inspect tail blocks.
#[derive(Debug, Clone)]
pub(crate) struct MarginalNodes {
    pub x: Vec<f64>,
    pub w: Vec<f64>,
    pub cdf: Vec<f64>,
    /// Nodes below this index cover the truncated core support.
    pub core_len: usize,
    /// Start index of each geometric tail block (after the core nodes).
    pub tail_starts: Vec<usize>,
    /// Atom representation (empirical marginal): no density, exact sums.
    pub atoms: bool,
}

/// Panel edges on [0, top]: equal-probability and equal-width families
/// interleaved, plus forced breakpoints. Equal-probability edges concentrate
/// panels where the mass is; the equal-width family bounds panel length so
/// exponential factors stay within Gauss-Legendre's reach.
fn panel_edges(
    m: &MarginalModel,
    panels: usize,
    trunc_prob: f64,
    breakpoints: &[f64],
) -> Result<Vec<f64>> {
    let top = m.quantile(trunc_prob)?;
    let half = (panels / 2).max(4);
    let mut edges = Vec::with_capacity(2 * half + breakpoints.len() + 2);
    for i in 0..=half {
        edges.push(m.quantile(trunc_prob * i as f64 / half as f64)?);
        edges.push(top * i as f64 / half as f64);
    }
    for &b in breakpoints {
        if b > 0.0 && b < top {
            edges.push(b);
        }
    }
    edges.sort_by(|a, b| a.partial_cmp(b).unwrap());
    edges.dedup_by(|a, b| (*a - *b).abs() <= 1e-13 * top.max(1.0));
    Ok(edges)
}

fn push_gl_panel(m: &MarginalModel, a: f64, b: f64, out: &mut MarginalNodes) -> Result<()> {
    let (gn, gw) = gauss_legendre_8();
    let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
    if half <= 0.0 {
        return Ok(());
    }
    for k in 0..8 {
        let x = mid + half * gn[k];
        out.x.push(x);
        out.w.push(gw[k] * half * m.pdf(x)?);
        out.cdf.push(m.cdf(x));
    }
    Ok(())
}

/// Build density-weighted nodes: core panels on [0, quantile(p)], then
/// geometric tail blocks until the block's marginal mass is negligible.
pub(crate) fn marginal_nodes(
    m: &MarginalModel,
    spec: &QuadratureSpec,
    breakpoints: &[f64],
) -> Result<MarginalNodes> {
    let mut out = MarginalNodes {
        x: Vec::new(),
        w: Vec::new(),
        cdf: Vec::new(),
        core_len: 0,
        tail_starts: Vec::new(),
        atoms: false,
    };
    if let MarginalModel::Empirical { sample } = m {
        let wn = 1.0 / sample.len() as f64;
        for &s in sample {
            out.x.push(s);
            out.w.push(wn);
            out.cdf.push(m.cdf(s));
        }
        out.core_len = out.x.len();
        out.atoms = true;
        return Ok(out);
    }
    let edges = panel_edges(m, spec.mesh_points, spec.truncation_prob, breakpoints)?;
    for pair in edges.windows(2) {
        push_gl_panel(m, pair[0], pair[1], &mut out)?;
    }
    out.core_len = out.x.len();
    // Geometric tail blocks, 4 panels each, built until the density itself
    // underflows. Growing integrands can make far blocks matter even where
    // the remaining mass is below f64 resolution, so the builder never
    // prunes on mass; block sums are evaluated lazily with early stopping.
    let top = *edges.last().unwrap();
    let mut a = top;
    let mut width = 0.5 * top.max(1.0);
    for _ in 0..48 {
        if m.pdf(a)? == 0.0 {
            break;
        }
        out.tail_starts.push(out.x.len());
        for p in 0..4 {
            let lo = a + width * p as f64 / 4.0;
            push_gl_panel(m, lo, lo + width / 4.0, &mut out)?;
        }
        a += width;
        width *= 2.0;
    }
    Ok(out)
}

/// Weighted sum over the nodes: core first, then tail blocks evaluated
/// lazily until their contribution settles below 1e-12 relative. Nodes whose
/// weight underflowed to zero are never evaluated. Tails that keep growing
/// past any reasonable magnitude, or that never settle, signal a
/// truncation-sensitive (non-integrable) integrand.
pub(crate) fn sum_nodes(
    nodes: &MarginalNodes,
    mut f: impl FnMut(usize) -> Result<f64>,
) -> Result<f64> {
    let mut acc = 0.0;
    for k in 0..nodes.core_len {
        if nodes.w[k] != 0.0 {
            acc += nodes.w[k] * f(k)?;
        }
    }
    if !acc.is_finite() {
        return Err(Error::Integrability(
            "integrand overflowed on the core support; effectively divergent".into(),
        ));
    }
    let core = acc;
    let mut tail_mag = 0.0;
    let mut growth = 0usize;
    let mut prev = f64::INFINITY;
    let mut last_block = None;
    for (bi, &start) in nodes.tail_starts.iter().enumerate() {
        let end = nodes
            .tail_starts
            .get(bi + 1)
            .copied()
            .unwrap_or(nodes.x.len());
        let mut b = 0.0;
        for k in start..end {
            if nodes.w[k] != 0.0 {
                b += nodes.w[k] * f(k)?;
            }
        }
        acc += b;
        tail_mag += b.abs();
        growth = if b.abs() > prev { growth + 1 } else { 0 };
        prev = b.abs();
        if !acc.is_finite() {
            return Err(Error::Integrability(format!(
                "tail block {bi} overflowed; the integral is effectively divergent"
            )));
        }
        if growth >= 4 && tail_mag > 1e4 * (core.abs() + 1e-6) {
            return Err(Error::Integrability(format!(
                "tail blocks keep growing: block {bi} contributes {b} on top of core {core}"
            )));
        }
        if b.abs() <= 1e-12 * (acc.abs() + 1e-300) {
            return Ok(acc);
        }
        last_block = Some(b);
    }
    if let Some(last) = last_block {
        if last.abs() > 1e-9 * (acc.abs() + 1e-300) {
            return Err(Error::Integrability(format!(
                "tail did not settle: last block contributes {last} against total {acc}"
            )));
        }
    }
    Ok(acc)
}

/// E f(X) for the marginal, by adaptive composite Gauss-Legendre: the panel
/// count doubles until the value moves less than 1e-7 relative, and the tail
/// is extended geometrically with a divergence guard.
pub fn integrate_marginal(
    f: impl FnMut(f64) -> f64,
    m: &MarginalModel,
    spec: &QuadratureSpec,
) -> Result<f64> {
    integrate_marginal_kinked(f, m, spec, &[])
}

/// `integrate_marginal` with known integrand kinks to pin panel edges on.
pub fn integrate_marginal_kinked(
    mut f: impl FnMut(f64) -> f64,
    m: &MarginalModel,
    spec: &QuadratureSpec,
    breakpoints: &[f64],
) -> Result<f64> {
    integrate_marginal_try(|x| Ok(f(x)), m, spec, breakpoints)
}

/// Fallible-integrand variant used where evaluation itself can error
/// (utility domain bounds).
pub(crate) fn integrate_marginal_try(
    mut f: impl FnMut(f64) -> Result<f64>,
    m: &MarginalModel,
    spec: &QuadratureSpec,
    breakpoints: &[f64],
) -> Result<f64> {
    spec.validate()?;
    if let MarginalModel::Empirical { sample } = m {
        let mut acc = 0.0;
        for &s in sample {
            acc += f(s)?;
        }
        return Ok(acc / sample.len() as f64);
    }
    let mut panels = spec.mesh_points;
    let mut prev: Option<f64> = None;
    for _ in 0..4 {
        let refined = QuadratureSpec {
            mesh_points: panels,
            ..spec.clone()
        };
        let nodes = marginal_nodes(m, &refined, breakpoints)?;
        let value = sum_nodes(&nodes, |k| f(nodes.x[k]))?;
        if let Some(p) = prev {
            if (value - p).abs() <= 1e-7 * (value.abs() + 1e-12) {
                return Ok(value);
            }
        }
        prev = Some(value);
        panels *= 2;
    }
    Err(Error::Quadrature(format!(
        "mesh doubling did not converge at {panels} panels; last value {}",
        prev.unwrap()
    )))
}

/// Copula density with the conditioned risk in its proper slot: risk 0 is the
/// copula's first argument.
pub(crate) fn density_for(cop: &CopulaModel, i: usize, u_cond: f64, v_other: f64) -> f64 {
    if i == 0 {
        cop.density(u_cond, v_other)
    } else {
        cop.density(v_other, u_cond)
    }
}

/// E[g(X) | X_i = x] where g sees the full claim vector. Two-risk portfolios
/// integrate against the conditional density c(F_i(x), F_j(y)) f_j(y);
/// independent portfolios of any size use the product law (Monte Carlo when
/// more than one free dimension remains).
pub fn cond_expect(
    mm: &MarketModel,
    i: usize,
    x: f64,
    g: &dyn Fn(&[f64]) -> f64,
    spec: &QuadratureSpec,
) -> Result<f64> {
    spec.validate()?;
    let n = mm.marginals.len();
    if i >= n {
        return Err(Error::Domain(format!("risk index {i} out of range for {n} risks")));
    }
    if x < 0.0 {
        return Err(Error::Domain(format!("conditioning claim must be nonnegative, got {x}")));
    }
    if n == 1 {
        return Ok(g(&[x]));
    }
    let independent = matches!(mm.copula, CopulaModel::Independence);
    if n > 2 && !independent {
        return Err(Error::Unsupported(
            "dependent portfolios support exactly two risks".into(),
        ));
    }
    if n == 2 && !spec.prefer_monte_carlo {
        let j = 1 - i;
        if matches!(mm.marginals[j], MarginalModel::Empirical { .. }) && !independent {
            return Err(Error::Unsupported(
                "conditioning against an empirical marginal requires independence".into(),
            ));
        }
        // pin panels to the copula's cell boundaries: the conditional
        // density jumps there
        let mut bp = Vec::new();
        for ub in mm.copula.u_breakpoints() {
            bp.push(mm.marginals[j].quantile(ub)?);
        }
        let nodes = marginal_nodes(&mm.marginals[j], spec, &bp)?;
        let u = mm.marginals[i].cdf(x);
        let mut buf = [0.0f64; 2];
        buf[i] = x;
        return sum_nodes(&nodes, |k| {
            let dens = if independent {
                1.0
            } else {
                density_for(&mm.copula, i, u, nodes.cdf[k])
            };
            buf[j] = nodes.x[k];
            Ok(dens * g(&buf))
        });
    }
    cond_expect_mc(mm, i, x, g, spec).map(|(v, _)| v)
}

/// Monte Carlo conditional expectation with antithetic pairing; returns the
/// estimate and its standard error.
pub(crate) fn cond_expect_mc(
    mm: &MarketModel,
    i: usize,
    x: f64,
    g: &dyn Fn(&[f64]) -> f64,
    spec: &QuadratureSpec,
) -> Result<(f64, f64)> {
    let n = mm.marginals.len();
    let independent = matches!(mm.copula, CopulaModel::Independence);
    if n > 2 && !independent {
        return Err(Error::Unsupported(
            "dependent portfolios support exactly two risks".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    rng.set_stream(i as u64 + 1);
    let cop_from_i = if i == 0 {
        mm.copula.clone()
    } else {
        mm.copula.transposed()
    };
    let u = mm.marginals[i].cdf(x);
    let pairs = (spec.mc_samples / 2).max(8);
    let mut buf = vec![0.0f64; n];
    buf[i] = x;
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for _ in 0..pairs {
        let mut pair_mean = 0.0;
        let draws: Vec<f64> = (0..n - 1).map(|_| rng.gen::<f64>()).collect();
        for flip in [false, true] {
            let mut slot = 0usize;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let p = if flip { 1.0 - draws[slot] } else { draws[slot] };
                let p = p.clamp(1e-12, 1.0 - 1e-12);
                let v = if independent {
                    p
                } else {
                    cop_from_i.cond_quantile(u, p)?
                };
                buf[j] = mm.marginals[j].quantile(v.min(spec.truncation_prob))?;
                slot += 1;
            }
            pair_mean += 0.5 * g(&buf);
        }
        sum += pair_mean;
        sumsq += pair_mean * pair_mean;
    }
    let mean = sum / pairs as f64;
    let var = (sumsq / pairs as f64 - mean * mean).max(0.0) / pairs as f64;
    Ok((mean, var.sqrt()))
}
