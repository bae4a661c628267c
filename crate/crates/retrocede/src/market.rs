//! Premium calculation principles and utility models. A principle prices a
//! ceded risk from its first k raw moments; the solver needs the premium, its
//! gradient, and its second derivatives in the moments. Utilities supply U,
//! U', U'' with U' > 0 >= U''.

use std::sync::Arc;

use crate::error::{Error, Result};

/// Loading applied to the ceded variance by the variance-related principle:
/// premium = m1 + g(m2 - m1^2).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VarianceLoading {
    /// g(v) = v.
    Identity,
    /// g(v) = beta * v, beta > 0.
    Scaled { beta: f64 },
}

impl VarianceLoading {
    fn g(&self, v: f64) -> f64 {
        match self {
            VarianceLoading::Identity => v,
            VarianceLoading::Scaled { beta } => beta * v,
        }
    }

    fn g_prime(&self, _v: f64) -> f64 {
        match self {
            VarianceLoading::Identity => 1.0,
            VarianceLoading::Scaled { beta } => *beta,
        }
    }

    fn g_second(&self, _v: f64) -> f64 {
        0.0
    }
}

/// User-supplied moment-based principle: psi maps the first `order` raw
/// moments to a premium; grad is its gradient. Second derivatives are taken
/// by central differences of grad when the solver needs them.
#[derive(Clone)]
pub struct GeneralMomentPrinciple {
    pub order: usize,
    pub psi: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    pub grad: Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>,
}

impl std::fmt::Debug for GeneralMomentPrinciple {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GeneralMomentPrinciple")
            .field("order", &self.order)
            .finish()
    }
}

/// Premium calculation principle Psi applied to the ceded risk's raw moments
/// (E Z, ..., E Z^k).
#[derive(Debug, Clone)]
pub enum PremiumPrinciple {
    /// (1 + loading) * E Z, order 1.
    ExpectedValue { loading: f64 },
    /// E Z + loading * sd(Z), order 2.
    StdDev { loading: f64 },
    /// E Z + g(Var Z), order 2.
    Variance { g: VarianceLoading },
    GeneralMoment(GeneralMomentPrinciple),
}

/// Check that a raw-moment vector lies in the closure of the admissible
/// region: 0 <= m1 <= m2^(1/2) <= ... <= mk^(1/k), within tolerance 1e-9.
/// Moments of any nonnegative random variable satisfy this, with equalities
/// exactly for degenerate ones.
pub fn validate_moment_vector(m: &[f64]) -> Result<()> {
    let tol = 1e-9;
    let mut prev = 0.0f64;
    for (j, &mj) in m.iter().enumerate() {
        if !mj.is_finite() || mj < -tol {
            return Err(Error::InvalidMoments(format!(
                "moment of order {} is {mj}",
                j + 1
            )));
        }
        let mean_j = mj.max(0.0).powf(1.0 / (j + 1) as f64);
        if mean_j < prev - tol * (1.0 + prev) {
            return Err(Error::InvalidMoments(format!(
                "power means must be nondecreasing: order {} gives {mean_j} after {prev}",
                j + 1
            )));
        }
        prev = mean_j.max(prev);
    }
    Ok(())
}

impl PremiumPrinciple {
    pub fn expected_value(loading: f64) -> Result<Self> {
        if !(loading >= 0.0) || !loading.is_finite() {
            return Err(Error::Config(format!(
                "expected-value loading must be nonnegative, got {loading}"
            )));
        }
        Ok(PremiumPrinciple::ExpectedValue { loading })
    }

    pub fn std_dev(loading: f64) -> Result<Self> {
        if !(loading >= 0.0) || !loading.is_finite() {
            return Err(Error::Config(format!(
                "standard-deviation loading must be nonnegative, got {loading}"
            )));
        }
        Ok(PremiumPrinciple::StdDev { loading })
    }

    pub fn variance(g: VarianceLoading) -> Result<Self> {
        if let VarianceLoading::Scaled { beta } = g {
            if !(beta > 0.0) || !beta.is_finite() {
                return Err(Error::Config(format!(
                    "variance loading scale must be positive, got {beta}"
                )));
            }
        }
        Ok(PremiumPrinciple::Variance { g })
    }

    /// Number of ceded-risk moments the principle consumes.
    pub fn order(&self) -> usize {
        match self {
            PremiumPrinciple::ExpectedValue { .. } => 1,
            PremiumPrinciple::StdDev { .. } | PremiumPrinciple::Variance { .. } => 2,
            PremiumPrinciple::GeneralMoment(p) => p.order,
        }
    }

    fn check_arity(&self, m: &[f64]) -> Result<()> {
        if m.len() != self.order() {
            return Err(Error::InvalidMoments(format!(
                "principle of order {} got {} moments",
                self.order(),
                m.len()
            )));
        }
        validate_moment_vector(m)
    }

    /// Premium for a ceded risk with raw moments m.
    pub fn premium(&self, m: &[f64]) -> Result<f64> {
        self.check_arity(m)?;
        let p = match self {
            PremiumPrinciple::ExpectedValue { loading } => (1.0 + loading) * m[0],
            PremiumPrinciple::StdDev { loading } => {
                let var = (m[1] - m[0] * m[0]).max(0.0);
                m[0] + loading * var.sqrt()
            }
            PremiumPrinciple::Variance { g } => {
                let var = (m[1] - m[0] * m[0]).max(0.0);
                m[0] + g.g(var)
            }
            PremiumPrinciple::GeneralMoment(p) => (p.psi)(m),
        };
        if !p.is_finite() || p < -1e-12 {
            return Err(Error::Domain(format!("premium {p} is not finite nonnegative")));
        }
        Ok(p.max(0.0))
    }

    /// Gradient of the premium in the moment vector.
    pub fn premium_gradient(&self, m: &[f64]) -> Result<Vec<f64>> {
        self.check_arity(m)?;
        match self {
            PremiumPrinciple::ExpectedValue { loading } => Ok(vec![1.0 + loading]),
            PremiumPrinciple::StdDev { loading } => {
                let var = m[1] - m[0] * m[0];
                if var < 1e-12 {
                    return Err(Error::Domain(format!(
                        "standard-deviation gradient undefined at variance {var}"
                    )));
                }
                let sd = var.sqrt();
                Ok(vec![1.0 - loading * m[0] / sd, loading / (2.0 * sd)])
            }
            PremiumPrinciple::Variance { g } => {
                let var = (m[1] - m[0] * m[0]).max(0.0);
                let gp = g.g_prime(var);
                Ok(vec![1.0 - 2.0 * m[0] * gp, gp])
            }
            PremiumPrinciple::GeneralMoment(p) => Ok((p.grad)(m)),
        }
    }

    /// Second derivative matrix of the premium in the moments; the moment-map
    /// Jacobian consumes it. GeneralMoment falls back to central differences
    /// of the supplied gradient.
    pub fn premium_hessian(&self, m: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_arity(m)?;
        match self {
            PremiumPrinciple::ExpectedValue { .. } => Ok(vec![vec![0.0]]),
            PremiumPrinciple::StdDev { loading } => {
                let var = m[1] - m[0] * m[0];
                if var < 1e-12 {
                    return Err(Error::Domain(format!(
                        "standard-deviation hessian undefined at variance {var}"
                    )));
                }
                // Psi = m1 + t sqrt(v), v = m2 - m1^2:
                // d2/dm1^2 = -t (1/sqrt(v) + m1^2 / v^(3/2)) ... derived from
                // d/dm1 [ -t m1 v^(-1/2) ] = -t v^(-1/2) - t m1^2 v^(-3/2)
                let t = *loading;
                let v = var;
                let h11 = -t * (v.powf(-0.5) + m[0] * m[0] * v.powf(-1.5));
                let h12 = t * m[0] / (2.0 * v.powf(1.5));
                let h22 = -t / (4.0 * v.powf(1.5));
                Ok(vec![vec![h11, h12], vec![h12, h22]])
            }
            PremiumPrinciple::Variance { g } => {
                let var = (m[1] - m[0] * m[0]).max(0.0);
                let gp = g.g_prime(var);
                let gs = g.g_second(var);
                let h11 = -2.0 * gp + 4.0 * m[0] * m[0] * gs;
                let h12 = -2.0 * m[0] * gs;
                let h22 = gs;
                Ok(vec![vec![h11, h12], vec![h12, h22]])
            }
            PremiumPrinciple::GeneralMoment(p) => {
                let k = p.order;
                let mut h = vec![vec![0.0; k]; k];
                for l in 0..k {
                    let step = 1e-5 * (1.0 + m[l].abs());
                    let mut hi = m.to_vec();
                    let mut lo = m.to_vec();
                    hi[l] += step;
                    lo[l] -= step;
                    let ghi = (p.grad)(&hi);
                    let glo = (p.grad)(&lo);
                    for r in 0..k {
                        h[l][r] = (ghi[r] - glo[r]) / (2.0 * step);
                    }
                }
                // symmetrize the finite-difference estimate
                for l in 0..k {
                    for r in (l + 1)..k {
                        let s = 0.5 * (h[l][r] + h[r][l]);
                        h[l][r] = s;
                        h[r][l] = s;
                    }
                }
                Ok(h)
            }
        }
    }
}

/// Utility of terminal wealth.
#[derive(Clone)]
pub enum UtilityModel {
    /// U(x) = -exp(-R x), constant absolute risk aversion R > 0.
    Exponential { risk_aversion: f64 },
    /// User-supplied increasing concave utility with derivatives, defined for
    /// wealth <= domain_bound.
    GeneralConcave {
        u: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
        u_prime: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
        u_double_prime: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
        domain_bound: f64,
    },
}

impl std::fmt::Debug for UtilityModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            UtilityModel::Exponential { risk_aversion } => f
                .debug_struct("Exponential")
                .field("risk_aversion", risk_aversion)
                .finish(),
            UtilityModel::GeneralConcave { domain_bound, .. } => f
                .debug_struct("GeneralConcave")
                .field("domain_bound", domain_bound)
                .finish(),
        }
    }
}

impl UtilityModel {
    pub fn exponential(risk_aversion: f64) -> Result<Self> {
        if !(risk_aversion > 0.0) || !risk_aversion.is_finite() {
            return Err(Error::Config(format!(
                "risk aversion must be positive and finite, got {risk_aversion}"
            )));
        }
        Ok(UtilityModel::Exponential { risk_aversion })
    }

    /// Wraps user closures after a sampled sanity check: U' > 0, U'' <= 0, and
    /// U' consistent with difference quotients of U on a coarse probe grid.
    pub fn general_concave(
        u: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
        u_prime: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
        u_double_prime: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
        domain_bound: f64,
    ) -> Result<Self> {
        let top = if domain_bound.is_finite() {
            domain_bound
        } else {
            50.0
        };
        for k in 0..=40 {
            let x = top - 0.25 * k as f64 * (1.0 + top.abs());
            let up = u_prime(x);
            let upp = u_double_prime(x);
            if !(up > 0.0) || upp > 1e-12 {
                return Err(Error::Config(format!(
                    "utility must be increasing concave; at x = {x}: U' = {up}, U'' = {upp}"
                )));
            }
            let h = 1e-5 * (1.0 + x.abs());
            let fd = (u(x) - u(x - h)) / h;
            if (fd - up).abs() > 1e-2 * (1.0 + up.abs()) {
                return Err(Error::Config(format!(
                    "U' inconsistent with U near x = {x}: difference quotient {fd} vs {up}"
                )));
            }
        }
        Ok(UtilityModel::GeneralConcave {
            u,
            u_prime,
            u_double_prime,
            domain_bound,
        })
    }

    fn check_domain(&self, x: f64) -> Result<()> {
        if let UtilityModel::GeneralConcave { domain_bound, .. } = self {
            if x > *domain_bound {
                return Err(Error::Domain(format!(
                    "wealth {x} exceeds the utility's domain bound {domain_bound}"
                )));
            }
        }
        Ok(())
    }

    pub fn utility(&self, x: f64) -> Result<f64> {
        self.check_domain(x)?;
        match self {
            // exp saturates to +inf / 0 in f64, which is exactly the sentinel
            // behavior wanted beyond |R x| ~ 700
            UtilityModel::Exponential { risk_aversion } => Ok(-(-risk_aversion * x).exp()),
            UtilityModel::GeneralConcave { u, .. } => Ok(u(x)),
        }
    }

    pub fn utility_prime(&self, x: f64) -> Result<f64> {
        self.check_domain(x)?;
        match self {
            UtilityModel::Exponential { risk_aversion } => {
                Ok(risk_aversion * (-risk_aversion * x).exp())
            }
            UtilityModel::GeneralConcave { u_prime, .. } => Ok(u_prime(x)),
        }
    }

    pub fn utility_double_prime(&self, x: f64) -> Result<f64> {
        self.check_domain(x)?;
        match self {
            UtilityModel::Exponential { risk_aversion } => {
                Ok(-risk_aversion * risk_aversion * (-risk_aversion * x).exp())
            }
            UtilityModel::GeneralConcave { u_double_prime, .. } => Ok(u_double_prime(x)),
        }
    }

    /// Absolute risk aversion -U''/U' when constant; the solver's fast path
    /// keys off this.
    pub fn constant_risk_aversion(&self) -> Option<f64> {
        match self {
            UtilityModel::Exponential { risk_aversion } => Some(*risk_aversion),
            UtilityModel::GeneralConcave { .. } => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn premium_examples() {
        let ev = PremiumPrinciple::expected_value(0.3).unwrap();
        assert_abs_diff_eq!(ev.premium(&[1.0]).unwrap(), 1.3, epsilon = 1e-15);
        let sd = PremiumPrinciple::std_dev(0.5).unwrap();
        assert_abs_diff_eq!(sd.premium(&[1.0, 2.0]).unwrap(), 1.5, epsilon = 1e-15);
        let var = PremiumPrinciple::variance(VarianceLoading::Identity).unwrap();
        assert_abs_diff_eq!(var.premium(&[1.0, 2.0]).unwrap(), 2.0, epsilon = 1e-15);
    }

    #[test]
    fn gradient_examples() {
        let ev = PremiumPrinciple::expected_value(0.3).unwrap();
        assert_eq!(ev.premium_gradient(&[5.0]).unwrap(), vec![1.3]);
        let sd = PremiumPrinciple::std_dev(0.5).unwrap();
        let g = sd.premium_gradient(&[1.0, 2.0]).unwrap();
        assert_abs_diff_eq!(g[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(g[1], 0.25, epsilon = 1e-15);
        let var = PremiumPrinciple::variance(VarianceLoading::Identity).unwrap();
        let g = var.premium_gradient(&[1.0, 2.0]).unwrap();
        assert_abs_diff_eq!(g[0], -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(g[1], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn moment_vector_validation() {
        // (2, 1): power means 2 > 1, impossible for a nonnegative risk
        let sd = PremiumPrinciple::std_dev(0.5).unwrap();
        assert!(matches!(
            sd.premium(&[2.0, 1.0]),
            Err(Error::InvalidMoments(_))
        ));
        assert!(matches!(
            sd.premium(&[-1.0, 1.0]),
            Err(Error::InvalidMoments(_))
        ));
        // boundary (degenerate) accepted for the premium itself
        assert_abs_diff_eq!(sd.premium(&[1.0, 1.0]).unwrap(), 1.0, epsilon = 1e-15);
        // wrong arity
        assert!(sd.premium(&[1.0]).is_err());
        // gradient at the degenerate boundary is a domain error
        assert!(matches!(
            sd.premium_gradient(&[1.0, 1.0]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cases: Vec<PremiumPrinciple> = vec![
            PremiumPrinciple::expected_value(0.3).unwrap(),
            PremiumPrinciple::std_dev(0.5).unwrap(),
            PremiumPrinciple::variance(VarianceLoading::Scaled { beta: 0.4 }).unwrap(),
        ];
        let points: Vec<Vec<f64>> = vec![
            vec![0.8, 1.5],
            vec![1.0, 2.0],
            vec![0.3, 0.4],
            vec![2.0, 6.0],
        ];
        for pp in &cases {
            for m in &points {
                let m = &m[..pp.order()];
                let grad = pp.premium_gradient(m).unwrap();
                for j in 0..pp.order() {
                    let step = 1e-6 * (1.0 + m[j].abs());
                    let mut hi = m.to_vec();
                    let mut lo = m.to_vec();
                    hi[j] += step;
                    lo[j] -= step;
                    let fd = (pp.premium(&hi).unwrap() - pp.premium(&lo).unwrap()) / (2.0 * step);
                    assert!(
                        (fd - grad[j]).abs() <= 1e-5 * (1.0 + grad[j].abs()),
                        "{pp:?} at {m:?}, component {j}: fd {fd} vs {}",
                        grad[j]
                    );
                }
            }
        }
    }

    #[test]
    fn hessians_match_finite_differences() {
        let cases: Vec<PremiumPrinciple> = vec![
            PremiumPrinciple::std_dev(0.5).unwrap(),
            PremiumPrinciple::variance(VarianceLoading::Scaled { beta: 0.4 }).unwrap(),
        ];
        for pp in &cases {
            for m in [[0.8f64, 1.5], [1.0, 2.5], [0.3, 0.5]] {
                let h = pp.premium_hessian(&m).unwrap();
                for l in 0..2 {
                    let step = 1e-6 * (1.0 + m[l].abs());
                    let mut hi = m.to_vec();
                    let mut lo = m.to_vec();
                    hi[l] += step;
                    lo[l] -= step;
                    let ghi = pp.premium_gradient(&hi).unwrap();
                    let glo = pp.premium_gradient(&lo).unwrap();
                    for r in 0..2 {
                        let fd = (ghi[r] - glo[r]) / (2.0 * step);
                        assert!(
                            (fd - h[l][r]).abs() <= 1e-4 * (1.0 + h[l][r].abs()),
                            "{pp:?} H[{l}][{r}]: fd {fd} vs {}",
                            h[l][r]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn upper_partials_nonnegative_and_no_common_zero() {
        // Corollary hypotheses for the shipped principles: dPsi/du2 > 0 on the
        // interior, and the gradient never vanishes entirely.
        let sd = PremiumPrinciple::std_dev(0.5).unwrap();
        let var = PremiumPrinciple::variance(VarianceLoading::Identity).unwrap();
        let mut checked = 0;
        for i in 1..=32 {
            for j in 1..=32 {
                let m1 = i as f64 / 8.0;
                let excess = j as f64 / 8.0;
                let m = [m1, m1 * m1 + excess];
                for pp in [&sd, &var] {
                    let g = pp.premium_gradient(&m).unwrap();
                    assert!(g[1] > 0.0, "{pp:?} dPsi/du2 at {m:?}");
                    assert!(g.iter().any(|c| c.abs() > 1e-12), "{pp:?} gradient zero");
                    checked += 1;
                }
            }
        }
        assert!(checked >= 1000);
        let ev = PremiumPrinciple::expected_value(0.0).unwrap();
        assert!(ev.premium_gradient(&[3.0]).unwrap()[0] >= 1.0);
    }

    #[test]
    fn exponential_utility_values() {
        let u = UtilityModel::exponential(2.0).unwrap();
        assert_abs_diff_eq!(u.utility(0.0).unwrap(), -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(u.utility_prime(0.0).unwrap(), 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(u.utility_double_prime(0.0).unwrap(), -4.0, epsilon = 1e-15);
        let u1 = UtilityModel::exponential(1.0).unwrap();
        assert_abs_diff_eq!(
            u1.utility_prime(2.0f64.ln()).unwrap(),
            0.5,
            epsilon = 1e-15
        );
        // -U''/U' = R at scattered wealth levels
        for x in [-3.0, 0.0, 1.7, 10.0] {
            let r = -u.utility_double_prime(x).unwrap() / u.utility_prime(x).unwrap();
            assert_abs_diff_eq!(r, 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn exponential_utility_saturates_not_panics() {
        let u = UtilityModel::exponential(1.0).unwrap();
        assert_eq!(u.utility(-800.0).unwrap(), f64::NEG_INFINITY);
        assert_eq!(u.utility_prime(-800.0).unwrap(), f64::INFINITY);
        assert_eq!(u.utility_prime(800.0).unwrap(), 0.0);
        assert_eq!(u.utility(800.0).unwrap(), 0.0);
    }

    #[test]
    fn general_concave_validation() {
        // U(x) = -(10 - x)^2: increasing and concave left of 10
        let ok = UtilityModel::general_concave(
            Arc::new(|x: f64| -(10.0 - x) * (10.0 - x)),
            Arc::new(|x: f64| 2.0 * (10.0 - x)),
            Arc::new(|_x: f64| -2.0),
            9.0,
        );
        assert!(ok.is_ok());
        let u = ok.unwrap();
        assert!(matches!(u.utility(9.5), Err(Error::Domain(_))));
        assert_abs_diff_eq!(u.utility(5.0).unwrap(), -25.0, epsilon = 1e-12);
        // convex impostor rejected
        let bad = UtilityModel::general_concave(
            Arc::new(|x: f64| x * x),
            Arc::new(|x: f64| 2.0 * x),
            Arc::new(|_x: f64| 2.0),
            10.0,
        );
        assert!(bad.is_err());
        // inconsistent derivative rejected
        let bad = UtilityModel::general_concave(
            Arc::new(|x: f64| x),
            Arc::new(|_x: f64| 3.0),
            Arc::new(|_x: f64| 0.0),
            10.0,
        );
        assert!(bad.is_err());
    }

    #[test]
    fn construction_validation() {
        assert!(PremiumPrinciple::expected_value(-0.1).is_err());
        assert!(PremiumPrinciple::std_dev(f64::NAN).is_err());
        assert!(PremiumPrinciple::variance(VarianceLoading::Scaled { beta: 0.0 }).is_err());
        assert!(UtilityModel::exponential(0.0).is_err());
        assert!(UtilityModel::exponential(-2.0).is_err());
    }
}
