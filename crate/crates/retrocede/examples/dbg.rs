use retrocede::dist::MarginalModel;
use retrocede::copula::CopulaModel;
use retrocede::market::{PremiumPrinciple, UtilityModel};
use retrocede::quad::QuadratureSpec;
use retrocede::solver::{newton_fixed_point, MomentState, SolverConfig};
use retrocede::treaty::{MarketModel, Strategy, TreatyCurve};

fn main() {
    let mm = MarketModel::new(
        vec![
            MarginalModel::exponential(1.0).unwrap(),
            MarginalModel::pareto(4.0, 5.0).unwrap(),
        ],
        CopulaModel::Independence,
        vec![
            PremiumPrinciple::StdDev { loading: 0.5 },
            PremiumPrinciple::StdDev { loading: 0.5 },
        ],
        UtilityModel::Exponential { risk_aversion: 1.0 },
        4.0,
    )
    .unwrap();
    let spec = QuadratureSpec::default();
    let cfg = SolverConfig::default();
    let treaties = vec![TreatyCurve::Full, TreatyCurve::Full];
    let strat = Strategy::priced(treaties.clone(), &mm, &spec).unwrap();
    println!("premiums {:?}", strat.premiums);
    let m0 = retrocede::solver::expected_marginal_utility(&mm, &strat, &spec).unwrap();
    let moments: Vec<Vec<f64>> = (0..2)
        .map(|j| strat.treaties[j].moments(&mm.marginals[j], 2, &spec).unwrap())
        .collect();
    println!("init m0 {m0} moments {moments:?}");
    let state = MomentState { m0, moments };

    let eps = 1e-2;
    for i in 0..2 {
        let fp = newton_fixed_point(
            &mm,
            i,
            state.m0,
            &state.moments[i],
            &state.moments,
            &treaties,
            eps,
            &cfg,
            &spec,
        );
        match fp {
            Ok(fp) => {
                let sd = (fp.moments[1] - fp.moments[0] * fp.moments[0]).max(0.0).sqrt();
                println!(
                    "risk {i}: m0 {:.6} m1 {:.6} m2 {:.6} sd {sd:.6e} resid {:.2e} newton {} fallback {}",
                    fp.m0, fp.moments[0], fp.moments[1], fp.residual,
                    fp.newton_iterations, fp.fallback_iterations
                );
                if let TreatyCurve::PiecewiseLinear { x, z } = &fp.treaty {
                    let k = x.len() - 1;
                    println!(
                        "  curve: knots {} first pos ({:.4},{:.4}) last two ({:.4},{:.4}) ({:.4},{:.4}) end slope {:.6}",
                        x.len(),
                        x.iter().zip(z.iter()).find(|(_, z)| **z > 0.0).map(|(x, _)| *x).unwrap_or(-1.0),
                        x.iter().zip(z.iter()).find(|(_, z)| **z > 0.0).map(|(_, z)| *z).unwrap_or(-1.0),
                        x[k - 1], z[k - 1], x[k], z[k],
                        (z[k] - z[k - 1]) / (x[k] - x[k - 1])
                    );
                }
            }
            Err(e) => println!("risk {i}: ERR {e}"),
        }
    }
}
