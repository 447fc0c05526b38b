use nalgebra::DVector;
use rayon::prelude::*;

use super::model::MarketModel;
use super::paths::{PathEnsemble, PathProcess};
use crate::error::{LabError, Result};

/// Market price of risk `theta = sigma_l^{-1} mu` and the structure-condition
/// integrand `lambda = diag(s)^{-1} (sigma_l sigma_l')^{-1} mu`.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskPrice {
    pub theta: DVector<f64>,
    pub lambda: DVector<f64>,
}

impl RiskPrice {
    pub fn theta_sq(&self) -> f64 {
        self.theta.norm_squared()
    }
}

const SINGULAR_RCOND: f64 = 1e-12;

pub fn market_price_of_risk(model: &MarketModel, t: f64, s: &[f64], r: &[f64]) -> Result<RiskPrice> {
    let coeffs = model.coefficients();
    let mu = coeffs.drift(t, s, r);
    let sigma = coeffs.asset_vol(t, s, r);
    let d = mu.len();

    if d == 1 {
        let sg = sigma[(0, 0)];
        if !(sg.abs() > 0.0) || !sg.is_finite() {
            return Err(LabError::Singular {
                t,
                condition: f64::INFINITY,
            });
        }
        let theta = mu[0] / sg;
        let lambda = mu[0] / (sg * sg * s[0]);
        return Ok(RiskPrice {
            theta: DVector::from_element(1, theta),
            lambda: DVector::from_element(1, lambda),
        });
    }

    let sv = sigma.singular_values();
    let hi = sv.max();
    let lo = sv.min();
    if !(lo > SINGULAR_RCOND * hi) {
        return Err(LabError::Singular {
            t,
            condition: if lo > 0.0 { hi / lo } else { f64::INFINITY },
        });
    }
    let lu = sigma.clone().lu();
    let theta = lu.solve(&mu).ok_or(LabError::Singular {
        t,
        condition: hi / lo,
    })?;
    // lambda = diag(s)^{-1} sigma'^{-1} theta
    let y = sigma
        .transpose()
        .lu()
        .solve(&theta)
        .ok_or(LabError::Singular { t, condition: hi / lo })?;
    let lambda = DVector::from_iterator(d, y.iter().zip(s).map(|(v, si)| v / si));
    Ok(RiskPrice { theta, lambda })
}

/// Per-path `K_t = int_0^t |theta_u|^2 du`, left-rectangle on the knots.
pub fn mean_variance_tradeoff(ensemble: &PathEnsemble, model: &MarketModel) -> Result<PathProcess> {
    check_shape(ensemble, model)?;
    let grid = *ensemble.grid();
    let dt = grid.dt();
    let knots = ensemble.n_knots();
    let rows: Vec<Result<Vec<f64>>> = (0..ensemble.n_paths())
        .into_par_iter()
        .map(|p| {
            let mut out = Vec::with_capacity(knots);
            let mut acc = 0.0;
            out.push(acc);
            for k in 0..grid.n_steps() {
                let rp = market_price_of_risk(model, grid.time(k), ensemble.s(p, k), ensemble.r(p, k))?;
                acc += rp.theta_sq() * dt;
                out.push(acc);
            }
            Ok(out)
        })
        .collect();
    let mut values = Vec::with_capacity(knots * ensemble.n_paths());
    for row in rows {
        values.extend(row?);
    }
    PathProcess::from_values(ensemble.n_paths(), knots, values)
}

pub(crate) fn check_shape(ensemble: &PathEnsemble, model: &MarketModel) -> Result<()> {
    if ensemble.asset_dim() != model.asset_dim() || ensemble.factor_dim() != model.factor_dim() {
        return Err(LabError::Shape(format!(
            "ensemble has ({}, {}) asset/factor dims, model has ({}, {})",
            ensemble.asset_dim(),
            ensemble.factor_dim(),
            model.asset_dim(),
            model.factor_dim()
        )));
    }
    Ok(())
}

/// Increments of a continuous local martingale `N = int a' dW` and of its
/// quadratic variation, per path and step.
#[derive(Debug, Clone)]
pub struct ExponentIncrements {
    n_paths: usize,
    n_steps: usize,
    martingale: Vec<f64>,
    quadratic: Vec<f64>,
}

impl ExponentIncrements {
    pub fn new(n_paths: usize, n_steps: usize, martingale: Vec<f64>, quadratic: Vec<f64>) -> Result<Self> {
        if martingale.len() != n_paths * n_steps || quadratic.len() != n_paths * n_steps {
            return Err(LabError::Shape("increment arrays must have n_paths * n_steps entries".into()));
        }
        Ok(Self {
            n_paths,
            n_steps,
            martingale,
            quadratic,
        })
    }

    /// Builds `a(t_k, S_k, R_k) . dW_k` and `|a|^2 dt` from an `n`-vector integrand.
    pub fn from_integrand<F>(ensemble: &PathEnsemble, integrand: F) -> Result<Self>
    where
        F: Fn(f64, &[f64], &[f64]) -> Result<Vec<f64>> + Sync,
    {
        let grid = *ensemble.grid();
        let dt = grid.dt();
        let n = ensemble.brownian_dim();
        let rows: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..ensemble.n_paths())
            .into_par_iter()
            .map(|p| {
                let mut dn = Vec::with_capacity(grid.n_steps());
                let mut dq = Vec::with_capacity(grid.n_steps());
                for k in 0..grid.n_steps() {
                    let a = integrand(grid.time(k), ensemble.s(p, k), ensemble.r(p, k))?;
                    if a.len() != n {
                        return Err(LabError::Shape(format!(
                            "integrand has {} components, Brownian dimension is {n}",
                            a.len()
                        )));
                    }
                    let dw = ensemble.dw(p, k);
                    dn.push(a.iter().zip(dw).map(|(x, w)| x * w).sum());
                    dq.push(a.iter().map(|x| x * x).sum::<f64>() * dt);
                }
                Ok((dn, dq))
            })
            .collect();
        let mut martingale = Vec::new();
        let mut quadratic = Vec::new();
        for row in rows {
            let (dn, dq) = row?;
            martingale.extend(dn);
            quadratic.extend(dq);
        }
        Self::new(ensemble.n_paths(), grid.n_steps(), martingale, quadratic)
    }
}

/// Doleans-Dade exponential `E = exp(N - <N>/2)` together with its logarithm.
#[derive(Debug, Clone)]
pub struct StochasticExponential {
    pub log: PathProcess,
    pub value: PathProcess,
}

pub fn stochastic_exponential(inc: &ExponentIncrements) -> StochasticExponential {
    let knots = inc.n_steps + 1;
    let mut log = Vec::with_capacity(inc.n_paths * knots);
    for p in 0..inc.n_paths {
        let mut n_acc = 0.0;
        let mut q_acc = 0.0;
        log.push(0.0);
        for k in 0..inc.n_steps {
            n_acc += inc.martingale[p * inc.n_steps + k];
            q_acc += inc.quadratic[p * inc.n_steps + k];
            log.push(n_acc - 0.5 * q_acc);
        }
    }
    let value: Vec<f64> = log.iter().map(|l| l.exp()).collect();
    StochasticExponential {
        log: PathProcess::from_values(inc.n_paths, knots, log).expect("shape"),
        value: PathProcess::from_values(inc.n_paths, knots, value).expect("shape"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{simulate_paths, BlackScholes, TimeGrid};
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use std::sync::Arc;

    #[test]
    fn scalar_risk_price() {
        let m = MarketModel::black_scholes(0.1, 0.2, 1.0).unwrap();
        let rp = market_price_of_risk(&m, 0.0, &[1.0], &[]).unwrap();
        assert_relative_eq!(rp.theta[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(rp.lambda[0], 2.5, epsilon = 1e-14);

        let m = MarketModel::black_scholes(0.0, 0.2, 1.0).unwrap();
        let rp = market_price_of_risk(&m, 0.0, &[1.0], &[]).unwrap();
        assert_eq!(rp.theta[0], 0.0);
        assert_eq!(rp.lambda[0], 0.0);
    }

    #[test]
    fn two_asset_diagonal_risk_price() {
        // sigma theta = mu by hand: 0.1/0.2, 0.2/0.4.
        // lambda_i = mu_i / (sigma_i^2 s_i): 0.1/(0.04*2), 0.2/(0.16*1).
        let bs = BlackScholes::multi(vec![0.1, 0.2], DMatrix::from_diagonal(&DVector::from_vec(vec![0.2, 0.4])));
        let m = MarketModel::new(Arc::new(bs), vec![2.0, 1.0], vec![]).unwrap();
        let rp = market_price_of_risk(&m, 0.0, &[2.0, 1.0], &[]).unwrap();
        assert_relative_eq!(rp.theta[0], 0.5, epsilon = 1e-14);
        assert_relative_eq!(rp.theta[1], 0.5, epsilon = 1e-14);
        assert_relative_eq!(rp.lambda[0], 1.25, epsilon = 1e-13);
        assert_relative_eq!(rp.lambda[1], 1.25, epsilon = 1e-13);
    }

    #[test]
    fn singular_volatility_is_reported() {
        let bs = BlackScholes::multi(vec![0.1, 0.1], DMatrix::from_row_slice(2, 2, &[0.2, 0.2, 0.2, 0.2]));
        let m = MarketModel::new(Arc::new(bs), vec![1.0, 1.0], vec![]).unwrap();
        assert!(matches!(
            market_price_of_risk(&m, 0.0, &[1.0, 1.0], &[]),
            Err(LabError::Singular { .. })
        ));
        let m = MarketModel::black_scholes(0.1, 0.0, 1.0).unwrap();
        assert!(market_price_of_risk(&m, 0.0, &[1.0], &[]).is_err());
    }

    #[test]
    fn constant_theta_tradeoff() {
        let m = MarketModel::black_scholes(0.1, 0.2, 1.0).unwrap();
        let ens = simulate_paths(&m, TimeGrid::new(1.0, 8).unwrap(), 20, 0).unwrap();
        let k = mean_variance_tradeoff(&ens, &m).unwrap();
        for p in 0..20 {
            assert_eq!(k.get(p, 0), 0.0);
            assert_relative_eq!(k.get(p, 8), 0.25, epsilon = 1e-14);
        }
        let m0 = MarketModel::black_scholes(0.0, 0.2, 1.0).unwrap();
        let k0 = mean_variance_tradeoff(&ens, &m0).unwrap();
        assert!(k0.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn exponential_of_zero_is_one() {
        let m = MarketModel::black_scholes(0.1, 0.2, 1.0).unwrap();
        let ens = simulate_paths(&m, TimeGrid::new(1.0, 8).unwrap(), 10, 0).unwrap();
        let inc = ExponentIncrements::from_integrand(&ens, |_, _, _| Ok(vec![0.0])).unwrap();
        let e = stochastic_exponential(&inc);
        assert!(e.value.values().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn exponential_log_identity() {
        let m = MarketModel::black_scholes(0.1, 0.2, 1.0).unwrap();
        let ens = simulate_paths(&m, TimeGrid::new(1.0, 16).unwrap(), 200, 4).unwrap();
        let inc = ExponentIncrements::from_integrand(&ens, |_, _, _| Ok(vec![0.5])).unwrap();
        let e = stochastic_exponential(&inc);
        for p in 0..200 {
            let w_t: f64 = (0..16).map(|k| ens.dw(p, k)[0]).sum();
            assert_relative_eq!(e.log.get(p, 16) + 0.5 * 0.25, 0.5 * w_t, epsilon = 1e-12);
            assert!(e.value.path(p).iter().all(|v| *v > 0.0));
            assert_eq!(e.value.get(p, 0), 1.0);
        }
    }
}
