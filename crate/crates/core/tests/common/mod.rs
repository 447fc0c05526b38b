//! Invariant checks shared by the property tests and the acceptance suite.
#![allow(dead_code)]

use std::sync::Arc;

use bellman_lab::bsde::{self, BsdeOptions, BsdeProblem};
use bellman_lab::market::{simulate_paths, LocalVolatility, MarketModel, OuFactor, TimeGrid};
use bellman_lab::pde::{solve_linear, Coordinate, PdeKind, PdeSpec};
use bellman_lab::utility::{Claim, UtilitySpec};
use bellman_lab::valuation::{
    closed_form, exponential_value, log_value, power_value_case1_pde, ExponentialInputs, LogSource, ValueProcess,
};
use bellman_lab::verify::driver_argmax_check;
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

pub type Check = Result<(), TestCaseError>;

pub fn local_vol(mu: f64, sigma0: f64, beta: f64) -> MarketModel {
    MarketModel::new(Arc::new(LocalVolatility { mu, sigma0, beta }), vec![1.0], vec![]).unwrap()
}

pub fn ou_model(theta1: f64, loading: f64) -> MarketModel {
    MarketModel::new(
        Arc::new(OuFactor {
            sigma: 0.2,
            theta0: 0.0,
            theta1,
            kappa: 1.0,
            mean: 0.3,
            factor_vol: 0.3,
            loading,
        }),
        vec![1.0],
        vec![0.3],
    )
    .unwrap()
}

/// Non-trivial value process for each family on a local-volatility market.
pub fn pde_value(family: usize, mu: f64, sigma0: f64, beta: f64) -> ValueProcess {
    let model = local_vol(mu, sigma0, beta);
    match family % 4 {
        0 => power_value_case1_pde(&UtilitySpec::power(0.5).unwrap(), &model, 1.0, 65, 64).unwrap(),
        1 => log_value(&model, 1.0, LogSource::Pde { coordinate: Coordinate::LogPrice, n_space: 65, n_time: 64 }).unwrap(),
        2 => exponential_value(
            &UtilitySpec::exponential(1.5, Claim::CappedCall { strike: 1.0, cap: 0.5 }).unwrap(),
            &model,
            1.0,
            ExponentialInputs::Case1 { coordinate: Coordinate::LogPrice, n_space: 65, n_time: 64 },
            1e3,
        )
        .unwrap(),
        _ => closed_form(&UtilitySpec::quadratic(4.0).unwrap(), &MarketModel::black_scholes(mu, sigma0, 1.0).unwrap(), 1.0)
            .unwrap(),
    }
}

/// Value factors stay positive: closed forms, the linear PDE and the
/// backward solver.
pub fn positivity(mu: f64, sigma: f64, beta: f64, p: f64, seed: u64) -> Check {
    let bs = MarketModel::black_scholes(mu, sigma, 1.0).unwrap();
    let power = UtilitySpec::power(p).unwrap();
    let cf = closed_form(&power, &bs, 1.0).unwrap();
    for t in [0.0, 0.3, 0.9, 1.0] {
        let f = cf.factor(t, &[1.0], &[]).unwrap();
        prop_assert!(f > 0.0, "closed-form factor {} at t = {}", f, t);
    }
    let model = local_vol(mu, sigma, beta);
    let q = power.conjugate_exponent().unwrap();
    let spec = PdeSpec::from_model(PdeKind::AlmostCompletePower { q }, Coordinate::LogPrice, &model, 1.0, 33, 32).unwrap();
    let grid = solve_linear(&spec).unwrap();
    prop_assert!(grid.min() > 0.0, "PDE minimum {}", grid.min());
    let ens = simulate_paths(&bs, TimeGrid::new(1.0, 10).unwrap(), 1000, seed).unwrap();
    let sol = bsde::solve(&BsdeProblem::for_utility(&power, &bs, &ens).unwrap(), &BsdeOptions::default()).unwrap();
    prop_assert!(sol.diagnostics.min_v > 0.0 && sol.diagnostics.floor_activations == 0);
    Ok(())
}

/// `V(T, x) = U(x)` for every representation.
pub fn terminal_exactness(family: usize, mu: f64, sigma: f64, beta: f64, x: f64, s: f64) -> Check {
    let vp = pde_value(family, mu, sigma, beta);
    let v = vp.value(1.0, x, &[s], &[]).unwrap();
    let u = vp.utility.terminal_utility(x, &[s], &[]);
    prop_assert!((v - u).abs() <= 1e-12 * u.abs().max(1.0), "V(T) = {} vs U = {}", v, u);
    Ok(())
}

/// The factor read back from `V(t, x)` does not depend on `x`.
pub fn factorization(family: usize, mu: f64, sigma: f64, beta: f64, t: f64, s: f64) -> Check {
    let vp = pde_value(family, mu, sigma, beta);
    let implied = |x: f64| -> f64 {
        let v = vp.value(t, x, &[s], &[]).unwrap();
        match &vp.utility {
            UtilitySpec::Power { p } => v / x.powf(*p),
            UtilitySpec::Log => v - x.ln(),
            UtilitySpec::Exponential { gamma, .. } => -v / (-gamma * x).exp(),
            UtilitySpec::Quadratic { b } => (b * b - v) / (x - b).powi(2),
        }
    };
    let base = implied(0.5);
    for x in [1.0, 2.0] {
        let y = implied(x);
        prop_assert!((y - base).abs() <= 1e-12 * base.abs().max(1.0), "factor {} at x = {} vs {}", y, x, base);
    }
    Ok(())
}

/// Same seed, same paths; another seed, other paths.
pub fn seed_determinism(seed: u64, theta1: f64) -> Check {
    let model = ou_model(theta1, 0.1);
    let grid = TimeGrid::new(1.0, 8).unwrap();
    let a = simulate_paths(&model, grid, 64, seed).unwrap();
    let b = simulate_paths(&model, grid, 64, seed).unwrap();
    let c = simulate_paths(&model, grid, 64, seed.wrapping_add(1)).unwrap();
    let mut differs = false;
    for p in 0..64 {
        for k in 0..=8 {
            prop_assert_eq!(a.s(p, k), b.s(p, k));
            prop_assert_eq!(a.r(p, k), b.r(p, k));
            differs |= a.s(p, k) != c.s(p, k);
        }
    }
    prop_assert!(differs, "a different seed reproduced the ensemble");
    Ok(())
}

/// Scaling `(V_x, phi_x, V_xx)` by `c > 0` leaves the maximizer alone.
pub fn argmax_scale_invariance(v_x: f64, v_xx: f64, phi_x: f64, lambda: f64, nu: f64) -> Check {
    let grid: Vec<f64> = (0..=1000).map(|i| -50.0 + 0.1 * i as f64).collect();
    let base = driver_argmax_check(v_x, v_xx, phi_x, lambda, nu, &grid).unwrap();
    for c in [0.1, 10.0] {
        let r = driver_argmax_check(c * v_x, c * v_xx, c * phi_x, lambda, nu, &grid).unwrap();
        let tol = 1e-12 * base.analytic_maximizer.abs().max(1.0);
        prop_assert!((r.analytic_maximizer - base.analytic_maximizer).abs() <= tol);
        prop_assert_eq!(r.grid_maximizer, base.grid_maximizer);
    }
    Ok(())
}

pub fn market_params() -> impl Strategy<Value = (f64, f64, f64)> {
    (0.0f64..0.15, 0.15f64..0.35, -0.5f64..0.0)
}

pub fn driver_tuple() -> impl Strategy<Value = (f64, f64, f64, f64, f64)> {
    (0.1f64..3.0, -3.0f64..-0.1, -1.0f64..1.0, -1.0f64..1.0, 0.05f64..1.0)
}
