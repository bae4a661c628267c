//! Claim-size marginals: exponential, Pareto (Lomax form), and empirical
//! samples. All are supported on [0, inf); the parametric two have smooth
//! densities, the empirical one only supports sample-based operations.

use crate::error::{Error, Result};

/// Marginal model of a single risk's claim size.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MarginalModel {
    /// F(x) = 1 - exp(-rate * x), rate > 0.
    Exponential { rate: f64 },
    /// Lomax: F(x) = 1 - (scale / (scale + x))^shape, scale > 0, shape > 1.
    /// Raw moment of order k exists only for k < shape.
    Pareto { scale: f64, shape: f64 },
    /// Empirical distribution of a nonnegative sample, kept sorted.
    Empirical { sample: Vec<f64> },
}

impl MarginalModel {
    pub fn exponential(rate: f64) -> Result<Self> {
        if !(rate > 0.0) || !rate.is_finite() {
            return Err(Error::Config(format!(
                "exponential rate must be positive and finite, got {rate}"
            )));
        }
        Ok(MarginalModel::Exponential { rate })
    }

    pub fn pareto(scale: f64, shape: f64) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::Config(format!(
                "pareto scale must be positive and finite, got {scale}"
            )));
        }
        if !(shape > 1.0) || !shape.is_finite() {
            return Err(Error::Config(format!(
                "pareto shape must exceed 1 so the mean exists, got {shape}"
            )));
        }
        Ok(MarginalModel::Pareto { scale, shape })
    }

    pub fn empirical(mut sample: Vec<f64>) -> Result<Self> {
        if sample.is_empty() {
            return Err(Error::Config("empirical sample is empty".into()));
        }
        if sample.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Config(
                "empirical sample must be finite and nonnegative".into(),
            ));
        }
        sample.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Ok(MarginalModel::Empirical { sample })
    }

    /// Largest raw-moment order this model can produce. `None` means every
    /// order is available.
    pub fn max_moment_order(&self) -> Option<f64> {
        match self {
            MarginalModel::Pareto { shape, .. } => Some(*shape),
            _ => None,
        }
    }

    /// P(X <= x). Zero left of the support.
    pub fn cdf(&self, x: f64) -> f64 {
        if x < 0.0 {
            return 0.0;
        }
        match self {
            MarginalModel::Exponential { rate } => -(-rate * x).exp_m1(),
            MarginalModel::Pareto { scale, shape } => {
                1.0 - (scale / (scale + x)).powf(*shape)
            }
            MarginalModel::Empirical { sample } => {
                let n = sample.partition_point(|s| *s <= x);
                n as f64 / sample.len() as f64
            }
        }
    }

    /// Density at x. Errors for the empirical model, which has none.
    pub fn pdf(&self, x: f64) -> Result<f64> {
        if x < 0.0 {
            return Ok(0.0);
        }
        match self {
            MarginalModel::Exponential { rate } => Ok(rate * (-rate * x).exp()),
            MarginalModel::Pareto { scale, shape } => {
                Ok(shape / scale * (scale / (scale + x)).powf(shape + 1.0))
            }
            MarginalModel::Empirical { .. } => Err(Error::Unsupported(
                "empirical model has no density; use sample-based operations".into(),
            )),
        }
    }

    /// Generalized inverse of the cdf. For the parametric models p = 1 has no
    /// finite preimage and is an error; the empirical model returns its
    /// largest sample point there.
    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Domain(format!(
                "quantile probability must lie in [0, 1], got {p}"
            )));
        }
        match self {
            MarginalModel::Exponential { rate } => {
                if p == 1.0 {
                    return Err(Error::InfiniteSupport(
                        "exponential quantile at p = 1".into(),
                    ));
                }
                Ok(-(-p).ln_1p() / rate)
            }
            MarginalModel::Pareto { scale, shape } => {
                if p == 1.0 {
                    return Err(Error::InfiniteSupport("pareto quantile at p = 1".into()));
                }
                Ok(scale * ((1.0 - p).powf(-1.0 / shape) - 1.0))
            }
            MarginalModel::Empirical { sample } => {
                let n = sample.len();
                if p == 0.0 {
                    return Ok(sample[0]);
                }
                let idx = ((p * n as f64).ceil() as usize).clamp(1, n) - 1;
                Ok(sample[idx])
            }
        }
    }

    /// E[X^k] for integer k >= 1. The Pareto moment exists only for k < shape.
    pub fn raw_moment(&self, k: u32) -> Result<f64> {
        if k == 0 {
            return Ok(1.0);
        }
        match self {
            MarginalModel::Exponential { rate } => {
                let mut m = 1.0;
                for j in 1..=k {
                    m *= j as f64 / rate;
                }
                Ok(m)
            }
            MarginalModel::Pareto { scale, shape } => {
                if (k as f64) >= *shape {
                    return Err(Error::Domain(format!(
                        "pareto raw moment of order {k} requires shape > {k}, got {shape}"
                    )));
                }
                let mut m = 1.0;
                for j in 1..=k {
                    m *= j as f64 * scale / (shape - j as f64);
                }
                Ok(m)
            }
            MarginalModel::Empirical { sample } => {
                let n = sample.len() as f64;
                Ok(sample.iter().map(|x| x.powi(k as i32)).sum::<f64>() / n)
            }
        }
    }

    pub fn mean(&self) -> Result<f64> {
        self.raw_moment(1)
    }

    /// Point below which the stated probability mass lies; quadrature domains
    /// are truncated here.
    pub fn truncation_point(&self, prob: f64) -> Result<f64> {
        self.quantile(prob)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// Test-local composite Simpson on [a, b]; independent of the quadrature
    /// module so it can serve as an oracle for it and for closed forms here.
    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let n = n + n % 2;
        let h = (b - a) / n as f64;
        let mut acc = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(a + i as f64 * h);
        }
        acc * h / 3.0
    }

    #[test]
    fn exponential_closed_forms() {
        let m = MarginalModel::exponential(1.0).unwrap();
        assert_abs_diff_eq!(m.cdf(1.0), 1.0 - (-1.0f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(m.pdf(0.0).unwrap(), 1.0, epsilon = 1e-15);
        assert_eq!(m.cdf(-1.0), 0.0);
        assert_abs_diff_eq!(m.raw_moment(1).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.raw_moment(2).unwrap(), 2.0, epsilon = 1e-15);
        let m2 = MarginalModel::exponential(2.0).unwrap();
        assert_abs_diff_eq!(m2.pdf(1.0).unwrap(), 2.0 * (-2.0f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(m2.raw_moment(3).unwrap(), 6.0 / 8.0, epsilon = 1e-15);
    }

    #[test]
    fn pareto_closed_forms() {
        let m = MarginalModel::pareto(4.0, 5.0).unwrap();
        assert_eq!(m.cdf(0.0), 0.0);
        assert_abs_diff_eq!(m.cdf(4.0), 0.96875, epsilon = 1e-15);
        assert_abs_diff_eq!(m.pdf(0.0).unwrap(), 1.25, epsilon = 1e-15);
        // E X = 1, E X^2 = 8/3 for scale 4, shape 5: the portfolio experiment
        // uses this marginal for its unit-mean heavy-tailed risk.
        assert_abs_diff_eq!(m.raw_moment(1).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.raw_moment(2).unwrap(), 8.0 / 3.0, epsilon = 1e-14);
        assert!(matches!(m.raw_moment(5), Err(Error::Domain(_))));
        assert!(matches!(m.raw_moment(6), Err(Error::Domain(_))));
    }

    #[test]
    fn pareto_moment_matches_quadrature() {
        let m = MarginalModel::pareto(4.0, 5.0).unwrap();
        let top = m.quantile(1.0 - 1e-12).unwrap();
        let quad = simpson(
            |x| x * x * 5.0 / 4.0 * (4.0 / (4.0 + x)).powi(6),
            0.0,
            top,
            400_000,
        );
        let exact = m.raw_moment(2).unwrap();
        assert!(
            ((quad - exact) / exact).abs() < 1e-6,
            "quad {quad} vs exact {exact}"
        );
    }

    #[test]
    fn pdf_is_cdf_derivative() {
        for m in [
            MarginalModel::exponential(0.7).unwrap(),
            MarginalModel::pareto(4.0, 5.0).unwrap(),
        ] {
            for x in [0.1, 0.5, 1.0, 3.0, 10.0] {
                let h = 1e-5;
                let fd = (m.cdf(x + h) - m.cdf(x - h)) / (2.0 * h);
                let pdf = m.pdf(x).unwrap();
                assert!(
                    (fd - pdf).abs() <= 1e-6 * (1.0 + pdf.abs()),
                    "fd {fd} vs pdf {pdf} at {x}"
                );
            }
        }
    }

    #[test]
    fn density_mass_is_one() {
        for m in [
            MarginalModel::exponential(1.3).unwrap(),
            MarginalModel::pareto(4.0, 5.0).unwrap(),
        ] {
            let top = m.quantile(1.0 - 1e-12).unwrap();
            let mass = simpson(|x| m.pdf(x).unwrap(), 0.0, top, 800_000);
            assert!((mass - 1.0).abs() < 1e-9, "mass {mass}");
        }
    }

    #[test]
    fn quantile_edges() {
        let e = MarginalModel::exponential(2.0).unwrap();
        let p = MarginalModel::pareto(4.0, 5.0).unwrap();
        assert_eq!(e.quantile(0.0).unwrap(), 0.0);
        assert_eq!(p.quantile(0.0).unwrap(), 0.0);
        assert!(matches!(e.quantile(1.0), Err(Error::InfiniteSupport(_))));
        assert!(matches!(p.quantile(1.0), Err(Error::InfiniteSupport(_))));
        assert!(matches!(e.quantile(1.5), Err(Error::Domain(_))));
        assert!(matches!(e.quantile(-0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn empirical_operations() {
        let m = MarginalModel::empirical(vec![3.0, 1.0, 2.0, 2.0]).unwrap();
        assert_eq!(m.cdf(0.5), 0.0);
        assert_eq!(m.cdf(1.0), 0.25);
        assert_eq!(m.cdf(2.0), 0.75);
        assert_eq!(m.cdf(10.0), 1.0);
        assert!(matches!(m.pdf(1.0), Err(Error::Unsupported(_))));
        assert_eq!(m.quantile(0.0).unwrap(), 1.0);
        assert_eq!(m.quantile(0.25).unwrap(), 1.0);
        assert_eq!(m.quantile(0.5).unwrap(), 2.0);
        assert_eq!(m.quantile(1.0).unwrap(), 3.0);
        assert_abs_diff_eq!(m.raw_moment(1).unwrap(), 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.raw_moment(2).unwrap(), 4.5, epsilon = 1e-15);
    }

    #[test]
    fn construction_validation() {
        assert!(MarginalModel::exponential(0.0).is_err());
        assert!(MarginalModel::exponential(-1.0).is_err());
        assert!(MarginalModel::exponential(f64::NAN).is_err());
        assert!(MarginalModel::pareto(0.0, 5.0).is_err());
        assert!(MarginalModel::pareto(4.0, 1.0).is_err());
        assert!(MarginalModel::empirical(vec![]).is_err());
        assert!(MarginalModel::empirical(vec![-1.0]).is_err());
    }

    proptest! {
        #[test]
        fn cdf_monotone_and_quantile_inverts(
            rate in 0.2f64..3.0,
            scale in 1.0f64..8.0,
            shape in 1.5f64..8.0,
            p in 1e-6f64..0.999_999,
        ) {
            for m in [
                MarginalModel::exponential(rate).unwrap(),
                MarginalModel::pareto(scale, shape).unwrap(),
            ] {
                let x = m.quantile(p).unwrap();
                prop_assert!((m.cdf(x) - p).abs() < 1e-9);
                prop_assert!(m.cdf(x + 0.01) >= m.cdf(x));
            }
        }
    }
}
