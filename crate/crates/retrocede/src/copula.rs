//! Dependence structures on [0,1]^2: independence, Frank, FGM, and
//! checkerboard (piecewise-uniform) copulas. Conditioning is exposed through
//! the h-function dC/du and its inverse; those two are what the conditional
//! quadrature and sampling paths consume.

use crate::error::{Error, Result};

/// Copula values on a uniform (G+1) x (G+1) grid, extended to [0,1]^2 by
/// bilinear interpolation per cell, i.e. uniform conditional mass per cell.
/// `values[i][j]` is C(i/G, j/G) with the first index along u.
///
/// Serialized as the bare value grid. Deserialization does not revalidate;
/// config loading rebuilds through [`Checkerboard::new`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct Checkerboard {
    values: Vec<Vec<f64>>,
}

impl Checkerboard {
    pub fn new(values: Vec<Vec<f64>>) -> Result<Self> {
        let n = values.len();
        if n < 2 || values.iter().any(|row| row.len() != n) {
            return Err(Error::Config(
                "checkerboard grid must be square with at least 2 points per side".into(),
            ));
        }
        if values
            .iter()
            .flatten()
            .any(|v| !v.is_finite() || *v < -1e-12 || *v > 1.0 + 1e-12)
        {
            return Err(Error::Config(
                "checkerboard values must be finite copula values in [0, 1]".into(),
            ));
        }
        let g = n - 1;
        let tol = 1e-12;
        for k in 0..n {
            let frac = k as f64 / g as f64;
            if values[0][k].abs() > tol || values[k][0].abs() > tol {
                return Err(Error::Config(format!(
                    "checkerboard not grounded at index {k}: C(0,t) and C(t,0) must be 0"
                )));
            }
            if (values[g][k] - frac).abs() > tol || (values[k][g] - frac).abs() > tol {
                return Err(Error::Config(format!(
                    "checkerboard margin at index {k} must be {frac}"
                )));
            }
        }
        for i in 0..g {
            for j in 0..g {
                let inc =
                    values[i + 1][j + 1] - values[i][j + 1] - values[i + 1][j] + values[i][j];
                if inc < -tol {
                    return Err(Error::Config(format!(
                        "checkerboard not 2-increasing on cell ({i}, {j}): increment {inc}"
                    )));
                }
            }
        }
        Ok(Checkerboard { values })
    }

    pub fn grid_size(&self) -> usize {
        self.values.len() - 1
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    /// Probability mass of cell (i, j).
    pub fn cell_mass(&self, i: usize, j: usize) -> f64 {
        let v = &self.values;
        (v[i + 1][j + 1] - v[i][j + 1] - v[i + 1][j] + v[i][j]).max(0.0)
    }

    /// Cell index for a coordinate; boundary points belong to the cell on
    /// their right, except 1.0 which falls in the last cell.
    fn cell(&self, t: f64) -> usize {
        let g = self.grid_size();
        ((t * g as f64).floor() as usize).min(g - 1)
    }

    fn transposed(&self) -> Checkerboard {
        let n = self.values.len();
        let mut values = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                values[i][j] = self.values[j][i];
            }
        }
        Checkerboard { values }
    }
}

/// Dependence model of the claim vector. Two-risk portfolios accept any
/// variant; larger portfolios must use `Independence`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CopulaModel {
    Independence,
    /// C(u,v) = -ln(1 + (e^{-au}-1)(e^{-av}-1)/(e^{-a}-1)) / a, a != 0.
    /// Evaluated through expm1/ln_1p so large |a| keeps full precision.
    Frank { alpha: f64 },
    /// C(u,v) = uv (1 + a(1-u)(1-v)), |a| <= 1.
    Fgm { alpha: f64 },
    Checkerboard { grid: Checkerboard },
}

/// exp(-a t) - 1, the Frank generator building block.
fn frank_g(alpha: f64, t: f64) -> f64 {
    (-alpha * t).exp_m1()
}

impl CopulaModel {
    pub fn frank(alpha: f64) -> Result<Self> {
        if alpha == 0.0 || !alpha.is_finite() || alpha.abs() > 700.0 {
            return Err(Error::Config(format!(
                "frank alpha must be nonzero, finite, and within +-700, got {alpha}"
            )));
        }
        Ok(CopulaModel::Frank { alpha })
    }

    pub fn fgm(alpha: f64) -> Result<Self> {
        if !alpha.is_finite() || !(-1.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!(
                "fgm alpha must lie in [-1, 1], got {alpha}"
            )));
        }
        Ok(CopulaModel::Fgm { alpha })
    }

    pub fn checkerboard(values: Vec<Vec<f64>>) -> Result<Self> {
        Ok(CopulaModel::Checkerboard {
            grid: Checkerboard::new(values)?,
        })
    }

    /// C(u, v).
    pub fn copula_cdf(&self, u: f64, v: f64) -> f64 {
        let (u, v) = (u.clamp(0.0, 1.0), v.clamp(0.0, 1.0));
        match self {
            CopulaModel::Independence => u * v,
            CopulaModel::Frank { alpha } => {
                let a = *alpha;
                -(frank_g(a, u) * frank_g(a, v) / frank_g(a, 1.0)).ln_1p() / a
            }
            CopulaModel::Fgm { alpha } => u * v * (1.0 + alpha * (1.0 - u) * (1.0 - v)),
            CopulaModel::Checkerboard { grid } => {
                let g = grid.grid_size() as f64;
                let (i, j) = (grid.cell(u), grid.cell(v));
                let (s, t) = (u * g - i as f64, v * g - j as f64);
                let c = &grid.values;
                (1.0 - s) * (1.0 - t) * c[i][j]
                    + s * (1.0 - t) * c[i + 1][j]
                    + (1.0 - s) * t * c[i][j + 1]
                    + s * t * c[i + 1][j + 1]
            }
        }
    }

    /// Copula density d2C/dudv. Checkerboard boundaries use the right-limit
    /// cell convention.
    pub fn density(&self, u: f64, v: f64) -> f64 {
        let (u, v) = (u.clamp(0.0, 1.0), v.clamp(0.0, 1.0));
        match self {
            CopulaModel::Independence => 1.0,
            CopulaModel::Frank { alpha } => {
                let a = *alpha;
                let g1 = frank_g(a, 1.0);
                let denom = g1 + frank_g(a, u) * frank_g(a, v);
                -a * g1 * (-a * (u + v)).exp() / (denom * denom)
            }
            CopulaModel::Fgm { alpha } => 1.0 + alpha * (2.0 * u - 1.0) * (2.0 * v - 1.0),
            CopulaModel::Checkerboard { grid } => {
                let g = grid.grid_size() as f64;
                grid.cell_mass(grid.cell(u), grid.cell(v)) * g * g
            }
        }
    }

    /// h-function: dC/du, the conditional cdf of V given U = u.
    pub fn cond_cdf(&self, u: f64, v: f64) -> f64 {
        let (u, v) = (u.clamp(0.0, 1.0), v.clamp(0.0, 1.0));
        match self {
            CopulaModel::Independence => v,
            CopulaModel::Frank { alpha } => {
                let a = *alpha;
                let gv = frank_g(a, v);
                ((-a * u).exp() * gv / (frank_g(a, 1.0) + frank_g(a, u) * gv)).clamp(0.0, 1.0)
            }
            CopulaModel::Fgm { alpha } => {
                v + alpha * v * (1.0 - v) * (1.0 - 2.0 * u)
            }
            CopulaModel::Checkerboard { grid } => {
                let g = grid.grid_size() as f64;
                let (i, j) = (grid.cell(u), grid.cell(v));
                let t = v * g - j as f64;
                let c = &grid.values;
                let lo = c[i + 1][j] - c[i][j];
                let hi = c[i + 1][j + 1] - c[i][j + 1];
                (((1.0 - t) * lo + t * hi) * g).clamp(0.0, 1.0)
            }
        }
    }

    /// Inverse of the h-function in v: smallest v with cond_cdf(u, v) >= p.
    /// Safeguarded Newton inside a shrinking bracket; bisection steps keep it
    /// in [0,1] when Newton is unusable.
    pub fn cond_quantile(&self, u: f64, p: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Domain(format!(
                "conditional quantile level must lie in [0, 1], got {p}"
            )));
        }
        if p == 0.0 {
            return Ok(0.0);
        }
        if p == 1.0 {
            return Ok(1.0);
        }
        if let CopulaModel::Independence = self {
            return Ok(p);
        }
        let f = |v: f64| self.cond_cdf(u, v) - p;
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        let mut v = p;
        for _ in 0..200 {
            let fv = f(v);
            if fv.abs() <= 1e-12 {
                return Ok(v);
            }
            if fv > 0.0 {
                hi = v;
            } else {
                lo = v;
            }
            if hi - lo < 1e-15 {
                return Ok(v);
            }
            let d = self.density(u, v);
            let newton = v - fv / d;
            v = if d > 1e-12 && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
        }
        let fv = f(v);
        if fv.abs() <= 1e-9 {
            Ok(v)
        } else {
            Err(Error::Domain(format!(
                "conditional quantile did not converge: u = {u}, p = {p}, residual = {fv}"
            )))
        }
    }

    /// d3C/du2dv. Closed form exists for FGM: 2 alpha (2v - 1); the stop-loss
    /// diagnostic is the only consumer and is FGM-specific.
    pub fn fgm_d3(&self, _u: f64, v: f64) -> Result<f64> {
        match self {
            CopulaModel::Fgm { alpha } => Ok(2.0 * alpha * (2.0 * v - 1.0)),
            _ => Err(Error::Unsupported(
                "third mixed copula derivative is only available for the FGM family".into(),
            )),
        }
    }

    /// Interior u-values where the density is discontinuous in u; quadrature
    /// panels align their edges here.
    pub fn u_breakpoints(&self) -> Vec<f64> {
        match self {
            CopulaModel::Checkerboard { grid } => {
                let g = grid.grid_size();
                (1..g).map(|i| i as f64 / g as f64).collect()
            }
            _ => Vec::new(),
        }
    }

    /// Copula of the swapped pair (V, U): conditioning on the second slot goes
    /// through this. All shipped parametric families are exchangeable; the
    /// checkerboard transposes its grid.
    pub(crate) fn transposed(&self) -> CopulaModel {
        match self {
            CopulaModel::Checkerboard { grid } => CopulaModel::Checkerboard {
                grid: grid.transposed(),
            },
            other => other.clone(),
        }
    }

    /// Draw (u, v) by conditional inversion.
    pub fn sample(&self, rng: &mut impl rand::Rng) -> Result<(f64, f64)> {
        let u: f64 = rng.gen();
        let p: f64 = rng.gen();
        Ok((u, self.cond_quantile(u, p)?))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn shipped_cases() -> Vec<CopulaModel> {
        vec![
            CopulaModel::Independence,
            CopulaModel::frank(10.0).unwrap(),
            CopulaModel::frank(-10.0).unwrap(),
            CopulaModel::frank(0.5).unwrap(),
            CopulaModel::fgm(0.8).unwrap(),
            CopulaModel::fgm(-1.0).unwrap(),
            CopulaModel::checkerboard(example_matrix()).unwrap(),
        ]
    }

    /// Doubly-stochastic example: 0.6 uniform + 0.4 permutation (0)(1)(2<->4)(3),
    /// cumulated to copula values. Positive dependence low, negative high.
    pub(crate) fn example_matrix() -> Vec<Vec<f64>> {
        let g = 5usize;
        let mut mass = vec![vec![0.024; g]; g];
        for (i, j) in [(0, 0), (1, 1), (2, 4), (3, 3), (4, 2)] {
            mass[i][j] += 0.08;
        }
        let mut c = vec![vec![0.0; g + 1]; g + 1];
        for i in 1..=g {
            for j in 1..=g {
                c[i][j] = c[i - 1][j] + c[i][j - 1] - c[i - 1][j - 1] + mass[i - 1][j - 1];
            }
        }
        c
    }

    #[test]
    fn grounded_and_uniform_margins() {
        for cop in shipped_cases() {
            for k in 0..=100 {
                let t = k as f64 / 100.0;
                assert!(cop.copula_cdf(0.0, t).abs() <= 1e-12, "{cop:?} C(0,{t})");
                assert!(cop.copula_cdf(t, 0.0).abs() <= 1e-12, "{cop:?} C({t},0)");
                assert!(
                    (cop.copula_cdf(t, 1.0) - t).abs() <= 1e-12,
                    "{cop:?} C({t},1) = {}",
                    cop.copula_cdf(t, 1.0)
                );
                assert!(
                    (cop.copula_cdf(1.0, t) - t).abs() <= 1e-12,
                    "{cop:?} C(1,{t})"
                );
            }
        }
    }

    #[test]
    fn two_increasing_on_refinement_grid() {
        let n = 64;
        for cop in shipped_cases() {
            for i in 0..n {
                for j in 0..n {
                    let (u0, u1) = (i as f64 / n as f64, (i + 1) as f64 / n as f64);
                    let (v0, v1) = (j as f64 / n as f64, (j + 1) as f64 / n as f64);
                    let inc = cop.copula_cdf(u1, v1) - cop.copula_cdf(u0, v1)
                        - cop.copula_cdf(u1, v0)
                        + cop.copula_cdf(u0, v0);
                    assert!(inc >= -1e-12, "{cop:?} rectangle ({i},{j}): {inc}");
                }
            }
        }
    }

    #[test]
    fn density_integrates_to_one() {
        // Tensor Simpson over [0,1]^2 for the smooth families; the
        // checkerboard integrates exactly as the sum of its cell masses.
        let n = 512usize;
        let w1 = |i: usize| -> f64 {
            if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            }
        };
        for cop in [
            CopulaModel::Independence,
            CopulaModel::frank(10.0).unwrap(),
            CopulaModel::frank(-10.0).unwrap(),
            CopulaModel::fgm(0.8).unwrap(),
        ] {
            let h = 1.0 / n as f64;
            let mut acc = 0.0;
            for i in 0..=n {
                let mut row = 0.0;
                for j in 0..=n {
                    row += w1(j) * cop.density(i as f64 * h, j as f64 * h);
                }
                acc += w1(i) * row * h / 3.0;
            }
            let total = acc * h / 3.0;
            assert!((total - 1.0).abs() < 1e-6, "{cop:?} mass {total}");
        }
        let grid = Checkerboard::new(example_matrix()).unwrap();
        let mass: f64 = (0..5)
            .flat_map(|i| (0..5).map(move |j| (i, j)))
            .map(|(i, j)| grid.cell_mass(i, j))
            .sum();
        assert_abs_diff_eq!(mass, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn density_matches_mixed_difference() {
        let h = 1e-4;
        for cop in shipped_cases() {
            if matches!(cop, CopulaModel::Checkerboard { .. }) {
                continue; // checked per cell below; differences straddle jumps
            }
            for u in [0.1, 0.3, 0.5, 0.7, 0.9] {
                for v in [0.1, 0.35, 0.6, 0.85] {
                    let mixed = (cop.copula_cdf(u + h, v + h) - cop.copula_cdf(u + h, v - h)
                        - cop.copula_cdf(u - h, v + h)
                        + cop.copula_cdf(u - h, v - h))
                        / (4.0 * h * h);
                    let d = cop.density(u, v);
                    assert!(
                        (mixed - d).abs() <= 1e-4 * (1.0 + d.abs()),
                        "{cop:?} at ({u},{v}): {mixed} vs {d}"
                    );
                }
            }
        }
    }

    #[test]
    fn checkerboard_density_is_cell_increment_over_area() {
        let cop = CopulaModel::checkerboard(example_matrix()).unwrap();
        let grid = Checkerboard::new(example_matrix()).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let (u, v) = ((i as f64 + 0.5) / 5.0, (j as f64 + 0.5) / 5.0);
                let expect = grid.cell_mass(i, j) * 25.0;
                assert_abs_diff_eq!(cop.density(u, v), expect, epsilon = 1e-12);
            }
        }
        // right-limit convention at the boundary
        assert_abs_diff_eq!(
            cop.density(0.2, 0.1),
            grid.cell_mass(1, 0) * 25.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn frank_small_alpha_approaches_independence() {
        // leading deviation is (alpha/2) uv(1-u)(1-v) <= alpha/32
        let cop = CopulaModel::frank(1e-5).unwrap();
        for u in [0.1, 0.4, 0.8] {
            for v in [0.2, 0.5, 0.9] {
                assert!((cop.copula_cdf(u, v) - u * v).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn frank_center_value_and_density_cross_check() {
        // C(1/2, 1/2) for alpha = 10, against the integrated density over
        // [0, 1/2]^2 (independent evaluation path).
        let cop = CopulaModel::frank(10.0).unwrap();
        let c = cop.copula_cdf(0.5, 0.5);
        assert!(c > 0.25 && c < 0.5, "positive dependence: {c}");
        let n = 800usize;
        let h = 0.5 / n as f64;
        let w = |i: usize| -> f64 {
            if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            }
        };
        let mut acc = 0.0;
        for i in 0..=n {
            let mut row = 0.0;
            for j in 0..=n {
                row += w(j) * cop.density(i as f64 * h, j as f64 * h);
            }
            acc += w(i) * row * h / 3.0;
        }
        let integrated = acc * h / 3.0;
        assert!(
            (integrated - c).abs() < 1e-7,
            "integrated {integrated} vs closed form {c}"
        );
    }

    #[test]
    fn h_function_endpoints_and_monotonicity() {
        for cop in shipped_cases() {
            for u in [0.05, 0.5, 0.95] {
                assert!(cop.cond_cdf(u, 0.0).abs() <= 1e-12);
                assert!((cop.cond_cdf(u, 1.0) - 1.0).abs() <= 1e-12);
                let mut prev = 0.0;
                for k in 1..=50 {
                    let v = k as f64 / 50.0;
                    let cur = cop.cond_cdf(u, v);
                    assert!(cur >= prev - 1e-12, "{cop:?} h not monotone at u={u}");
                    prev = cur;
                }
            }
        }
    }

    #[test]
    fn cond_quantile_round_trip() {
        for cop in shipped_cases() {
            for u in [0.08, 0.5, 0.93] {
                for p in [1e-6, 0.01, 0.3, 0.5, 0.77, 0.99, 1.0 - 1e-9] {
                    let v = cop.cond_quantile(u, p).unwrap();
                    let back = cop.cond_cdf(u, v);
                    assert!(
                        (back - p).abs() <= 1e-9,
                        "{cop:?} u={u} p={p}: v={v} back={back}"
                    );
                }
            }
        }
    }

    #[test]
    fn fgm_third_derivative() {
        let cop = CopulaModel::fgm(0.8).unwrap();
        assert_abs_diff_eq!(cop.fgm_d3(0.3, 0.5).unwrap(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(cop.fgm_d3(0.9, 1.0).unwrap(), 1.6, epsilon = 1e-15);
        assert_abs_diff_eq!(cop.fgm_d3(0.1, 0.0).unwrap(), -1.6, epsilon = 1e-15);
        assert!(matches!(
            CopulaModel::frank(2.0).unwrap().fgm_d3(0.5, 0.5),
            Err(Error::Unsupported(_))
        ));
        assert!(matches!(
            CopulaModel::Independence.fgm_d3(0.5, 0.5),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn fgm_second_u_derivative_sign() {
        // d2C/du2 = -2 a v(1-v) <= 0 for a > 0: ceding against positive
        // dependence, the conditional cdf flattens in u.
        let cop = CopulaModel::fgm(1.0).unwrap();
        let h = 1e-4;
        for u in [0.2, 0.5, 0.8] {
            for v in [0.1, 0.5, 0.9] {
                let second = (cop.copula_cdf(u + h, v) - 2.0 * cop.copula_cdf(u, v)
                    + cop.copula_cdf(u - h, v))
                    / (h * h);
                assert!(second <= 1e-6, "d2C/du2 = {second} at ({u},{v})");
            }
        }
    }

    #[test]
    fn transposed_swaps_conditioning() {
        let cop = CopulaModel::checkerboard(example_matrix()).unwrap();
        let t = cop.transposed();
        for u in [0.12, 0.5, 0.88] {
            for v in [0.21, 0.63, 0.97] {
                assert_abs_diff_eq!(
                    cop.copula_cdf(u, v),
                    t.copula_cdf(v, u),
                    epsilon = 1e-15
                );
            }
        }
    }

    #[test]
    fn checkerboard_sampling_reproduces_cell_mass() {
        let cop = CopulaModel::checkerboard(example_matrix()).unwrap();
        let grid = Checkerboard::new(example_matrix()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let n = 100_000usize;
        let mut counts = vec![vec![0usize; 5]; 5];
        for _ in 0..n {
            let (u, v) = cop.sample(&mut rng).unwrap();
            counts[grid.cell(u)][grid.cell(v)] += 1;
        }
        for i in 0..5 {
            for j in 0..5 {
                let p = grid.cell_mass(i, j);
                let se = (p * (1.0 - p) / n as f64).sqrt();
                let freq = counts[i][j] as f64 / n as f64;
                assert!(
                    (freq - p).abs() <= 3.0 * se,
                    "cell ({i},{j}): freq {freq} vs mass {p} (se {se})"
                );
            }
        }
    }

    #[test]
    fn validation_rejects_bad_grids() {
        assert!(CopulaModel::frank(0.0).is_err());
        assert!(CopulaModel::fgm(1.5).is_err());
        assert!(CopulaModel::fgm(-1.01).is_err());
        // not grounded
        let mut bad = example_matrix();
        bad[0][2] = 0.1;
        assert!(Checkerboard::new(bad).is_err());
        // broken margin
        let mut bad = example_matrix();
        bad[5][2] = 0.3;
        assert!(Checkerboard::new(bad).is_err());
        // not 2-increasing: error must name the offending cell
        let mut bad = example_matrix();
        bad[2][2] += 0.2;
        bad[5][5] = 1.0;
        match Checkerboard::new(bad) {
            Err(Error::Config(msg)) => assert!(msg.contains("cell"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
        // non-square
        assert!(Checkerboard::new(vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]]).is_err());
    }

    proptest! {
        #[test]
        fn copula_bounds_hold(
            u in 0.0f64..=1.0,
            v in 0.0f64..=1.0,
            alpha in -20.0f64..20.0,
        ) {
            let cases = if alpha.abs() < 1e-6 {
                vec![CopulaModel::Independence]
            } else {
                vec![
                    CopulaModel::frank(alpha).unwrap(),
                    CopulaModel::fgm(alpha.clamp(-1.0, 1.0)).unwrap(),
                ]
            };
            for cop in cases {
                let c = cop.copula_cdf(u, v);
                // Frechet-Hoeffding bounds
                prop_assert!(c >= (u + v - 1.0).max(0.0) - 1e-12);
                prop_assert!(c <= u.min(v) + 1e-12);
                let h = cop.cond_cdf(u, v);
                prop_assert!((-1e-12..=1.0 + 1e-12).contains(&h));
            }
        }
    }
}
