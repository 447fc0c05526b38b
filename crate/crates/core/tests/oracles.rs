mod common;

use bellman_lab::market::{
    market_price_of_risk, mean_stderr, mean_variance_tradeoff, simulate_paths, stochastic_exponential,
    ExponentIncrements, MarketModel, TimeGrid,
};
use bellman_lab::pde::{feynman_kac_mc, solve_linear, Coordinate, PdeKind, PdeSpec};
use bellman_lab::utility::UtilitySpec;
use bellman_lab::valuation::power_value_case1_pde;

/// Local volatility with a price-dependent market price of risk, p = 0.5.
fn cev() -> MarketModel {
    common::local_vol(0.08, 0.2, -0.5)
}

#[test]
fn cev_case1_grid_matches_feynman_kac() {
    let model = cev();
    let spec = PdeSpec::from_model(PdeKind::AlmostCompletePower { q: -1.0 }, Coordinate::LogPrice, &model, 1.0, 201, 200)
        .unwrap();
    let grid = solve_linear(&spec).unwrap();
    let probes = [(0.0, spec.x0), (0.0, spec.x0 - 0.2), (0.0, spec.x0 + 0.2), (0.5, spec.x0)];
    for e in feynman_kac_mc(&spec, &probes, 40_000, 11).unwrap() {
        let v = grid.eval(e.t, e.x).unwrap();
        assert!((v - e.mean).abs() <= 3.0 * e.stderr + 2e-3, "{v} vs {} +- {}", e.mean, e.stderr);
    }
}

/// In a complete one-asset market the power value factor is
/// `(E[Z_T^q])^{1/(1-q)}` with `Z` the density of the martingale measure,
/// simulated here under the physical measure.
#[test]
fn cev_case1_matches_physical_measure_density_oracle() {
    let model = cev();
    let q = -1.0;
    let v_pde = power_value_case1_pde(&UtilitySpec::power(0.5).unwrap(), &model, 1.0, 201, 200)
        .unwrap()
        .factor(0.0, &[1.0], &[])
        .unwrap();
    let ens = simulate_paths(&model, TimeGrid::new(1.0, 400).unwrap(), 40_000, 12).unwrap();
    let inc = ExponentIncrements::from_integrand(&ens, |t, s, r| {
        Ok(market_price_of_risk(&model, t, s, r)?.theta.iter().map(|x| -x).collect())
    })
    .unwrap();
    let z = stochastic_exponential(&inc);
    let zq: Vec<f64> = z.value.column(400).iter().map(|v| v.powf(q)).collect();
    let (m, se) = mean_stderr(&zq);
    let oracle = m.powf(1.0 / (1.0 - q));
    // delta method for the stderr of m^{1/(1-q)}
    let oracle_se = oracle / (1.0 - q) * se / m;
    assert!(
        (v_pde - oracle).abs() <= 3.0 * oracle_se + 1e-3 * oracle,
        "PDE {v_pde} vs oracle {oracle} +- {oracle_se}"
    );
}

#[test]
fn density_is_a_martingale_and_tradeoff_integrates_theta() {
    let model = MarketModel::black_scholes(0.1, 0.2, 1.0).unwrap();
    let ens = simulate_paths(&model, TimeGrid::new(1.0, 50).unwrap(), 20_000, 13).unwrap();
    let inc = ExponentIncrements::from_integrand(&ens, |t, s, r| {
        Ok(market_price_of_risk(&model, t, s, r)?.theta.iter().map(|x| -x).collect())
    })
    .unwrap();
    let z = stochastic_exponential(&inc);
    for k in [10, 25, 50] {
        let (m, se) = z.value.mean_stderr(k);
        assert!((m - 1.0).abs() <= 3.0 * se, "E[Z] = {m} +- {se} at knot {k}");
    }
    let tradeoff = mean_variance_tradeoff(&ens, &model).unwrap();
    for p in [0, 7, 19_999] {
        assert!((tradeoff.get(p, 50) - 0.25).abs() < 1e-12);
    }
}
