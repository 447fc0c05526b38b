//! Value processes of the four utility families and the optimal strategies
//! they induce.
//!
//! Every value function factorizes in wealth: `x^p V_t` (power),
//! `log x + V_t` (log), `-exp(-gamma x) V_t` (exponential) and
//! `b^2 - (x - b)^2 V_t` (quadratic). A [`ValueProcess`] carries the factor
//! `V_t` as a function of the Markov state together with the asset
//! coordinates of its martingale integrand.

mod cases;

pub use cases::*;

use std::sync::Arc;

use nalgebra::DVector;
use serde::Serialize;

use crate::bsde::regression::predict;
use crate::bsde::{CurvePoint, KnotFit};
use crate::error::{LabError, Result};
use crate::market::{market_price_of_risk, MarketModel, PathProcess, StrategyRule, TimeGrid};
use crate::pde::{Coordinate, GridFunction};
use crate::utility::UtilitySpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ClosedFormula {
    LogMerton,
    PowerCase1Deterministic,
    PowerCase2Deterministic,
    ExponentialDeterministic,
    QuadraticDeterministic,
}

/// How grid values map to the value factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GridTransform {
    Identity,
    Power { exponent: f64 },
    Exp,
}

impl GridTransform {
    fn apply(&self, g: f64) -> f64 {
        match self {
            GridTransform::Identity => g,
            GridTransform::Power { exponent } => g.powf(*exponent),
            GridTransform::Exp => g.exp(),
        }
    }

    fn derivative(&self, g: f64) -> f64 {
        match self {
            GridTransform::Identity => 1.0,
            GridTransform::Power { exponent } => exponent * g.powf(exponent - 1.0),
            GridTransform::Exp => g.exp(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Representation {
    /// `(level exp(rate (T - t)))^power` for multiplicative factors,
    /// `level + rate (T - t)` for the additive log part.
    ClosedForm {
        formula: ClosedFormula,
        rate: f64,
        level: f64,
        power: f64,
    },
    /// Per-knot regression fits of the factor and its integrand.
    PathSamples {
        grid: TimeGrid,
        fits: Vec<KnotFit>,
        samples: PathProcess,
        curve: Vec<CurvePoint>,
    },
    Grid {
        grid: GridFunction,
        coordinate: Coordinate,
        transform: GridTransform,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseId {
    Case1MinimalMeasure,
    Case2Orthogonal,
}

/// Evidence for the structural hypothesis behind an explicit value formula.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseCertificate {
    pub case_id: CaseId,
    /// Case 1: largest change of `theta` when the factor moves across the
    /// state box. Case 2: largest `|corr(F, W^l_T)|` between the sampled
    /// functional and the terminal asset Brownian motions.
    pub residual: f64,
    /// Whether the model satisfies the hypothesis by construction.
    pub structural: bool,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ValueProcess {
    pub utility: UtilitySpec,
    pub model: MarketModel,
    pub horizon: f64,
    pub representation: Representation,
    pub certificate: Option<CaseCertificate>,
    pub diagnostics: Vec<String>,
}

/// `V(t, x)` and its wealth derivatives; `z_x` holds the asset coordinates
/// of the wealth derivative of the martingale integrand.
#[derive(Debug, Clone, PartialEq)]
pub struct XDerivatives {
    pub value: f64,
    pub v_x: f64,
    pub v_xx: f64,
    pub z_x: Vec<f64>,
}

impl ValueProcess {
    pub fn is_additive(&self) -> bool {
        matches!(self.utility, UtilitySpec::Log)
    }

    fn check_time(&self, t: f64) -> Result<()> {
        let tol = 1e-9 * self.horizon.max(1.0);
        if !(t >= -tol && t <= self.horizon + tol) {
            return Err(LabError::Extrapolation(format!("t={t} outside [0, {}]", self.horizon)));
        }
        Ok(())
    }

    /// Terminal value of the factor.
    pub fn terminal(&self, s: &[f64], r: &[f64]) -> f64 {
        match &self.utility {
            UtilitySpec::Log => 0.0,
            UtilitySpec::Exponential { gamma, claim } => (gamma * claim.eval(s, r)).exp(),
            _ => 1.0,
        }
    }

    /// The factor `V_t` at state `(s, r)`.
    pub fn factor(&self, t: f64, s: &[f64], r: &[f64]) -> Result<f64> {
        self.check_time(t)?;
        match &self.representation {
            Representation::ClosedForm { rate, level, power, .. } => {
                let tau = (self.horizon - t).max(0.0);
                Ok(if self.is_additive() {
                    level + rate * tau
                } else {
                    (level * (rate * tau).exp()).powf(*power)
                })
            }
            Representation::PathSamples { grid, fits, .. } => {
                let k = grid.knot_index(t)?;
                if k == grid.n_steps() {
                    return Ok(self.terminal(s, r));
                }
                let fit = &fits[k];
                Ok(predict(&fit.basis, &fit.value, &features(s, r)))
            }
            Representation::Grid { grid, coordinate, transform } => {
                if t >= self.horizon {
                    return Ok(self.terminal(s, r));
                }
                let x = coordinate_of(*coordinate, s, r);
                Ok(transform.apply(grid.eval(t, x)?))
            }
        }
    }

    /// Asset coordinates of the martingale integrand of the factor.
    pub fn integrand(&self, t: f64, s: &[f64], r: &[f64]) -> Result<Vec<f64>> {
        self.check_time(t)?;
        let d = self.model.asset_dim();
        match &self.representation {
            Representation::ClosedForm { .. } => Ok(vec![0.0; d]),
            Representation::PathSamples { grid, fits, .. } => {
                let k = grid.knot_index(t)?.min(grid.n_steps() - 1);
                let fit = &fits[k];
                let x = features(s, r);
                Ok(fit.integrand[..d].iter().map(|c| predict(&fit.basis, c, &x)).collect())
            }
            Representation::Grid { grid, coordinate, transform } => {
                let x = coordinate_of(*coordinate, s, r);
                let dv = transform.derivative(grid.eval(t, x)?) * grid.eval_dx(t, x)?;
                let coeffs = self.model.coefficients();
                Ok(match coordinate {
                    // d log s = ... + sigma dW^l
                    Coordinate::LogPrice => {
                        let sigma = coeffs.asset_vol(t, s, r);
                        (0..d).map(|j| sigma[(0, j)] * dv).collect()
                    }
                    Coordinate::Factor => {
                        let delta = coeffs.factor_loading(t, s, r);
                        (0..d).map(|j| delta[(0, j)] * dv).collect()
                    }
                })
            }
        }
    }

    /// `V(t, x)` for wealth `x`.
    pub fn value(&self, t: f64, x: f64, s: &[f64], r: &[f64]) -> Result<f64> {
        Ok(self.x_derivatives(t, x, s, r)?.value)
    }

    pub fn x_derivatives(&self, t: f64, x: f64, s: &[f64], r: &[f64]) -> Result<XDerivatives> {
        let y = self.factor(t, s, r)?;
        let z = if t < self.horizon { self.integrand(t, s, r)? } else { vec![0.0; self.model.asset_dim()] };
        wealth_derivatives(&self.utility, x, y, &z)
    }

    /// Optimal share holdings `-diag(s)^{-1} sigma_l'^{-1} (z_x + theta V_x) / V_xx`.
    pub fn optimal_holdings(&self, t: f64, x: f64, s: &[f64], r: &[f64]) -> Result<Vec<f64>> {
        let xd = self.x_derivatives(t, x, s, r)?;
        let rp = market_price_of_risk(&self.model, t, s, r)?;
        holdings_from_derivatives(&self.model, t, s, r, &xd, &rp.theta)
    }
}

pub(crate) fn features(s: &[f64], r: &[f64]) -> Vec<f64> {
    s.iter().map(|v| v.ln()).chain(r.iter().cloned()).collect()
}

fn coordinate_of(coordinate: Coordinate, s: &[f64], r: &[f64]) -> f64 {
    match coordinate {
        Coordinate::LogPrice => s[0].ln(),
        Coordinate::Factor => r[0],
    }
}

/// Wealth derivatives of the factorized value function given the factor `y`
/// and its integrand `z`.
pub fn wealth_derivatives(utility: &UtilitySpec, x: f64, y: f64, z: &[f64]) -> Result<XDerivatives> {
    if utility.positive_domain() && !(x > 0.0) {
        return Err(LabError::Domain(format!("wealth must be positive, got {x}")));
    }
    let (value, v_x, v_xx, dz) = match utility {
        UtilitySpec::Power { p } => {
            let xp = x.powf(*p);
            (xp * y, p * xp / x * y, p * (p - 1.0) * xp / (x * x) * y, p * xp / x)
        }
        UtilitySpec::Log => (x.ln() + y, 1.0 / x, -1.0 / (x * x), 0.0),
        UtilitySpec::Exponential { gamma, .. } => {
            let e = (-gamma * x).exp();
            (-e * y, gamma * e * y, -gamma * gamma * e * y, gamma * e)
        }
        UtilitySpec::Quadratic { b } => (b * b - (x - b).powi(2) * y, -2.0 * (x - b) * y, -2.0 * y, -2.0 * (x - b)),
    };
    Ok(XDerivatives {
        value,
        v_x,
        v_xx,
        z_x: z.iter().map(|zi| dz * zi).collect(),
    })
}

pub(crate) fn holdings_from_derivatives(
    model: &MarketModel,
    t: f64,
    s: &[f64],
    r: &[f64],
    xd: &XDerivatives,
    theta: &DVector<f64>,
) -> Result<Vec<f64>> {
    if !(xd.v_xx < 0.0) {
        return Err(LabError::Concavity(format!("V_xx = {} is not negative", xd.v_xx)));
    }
    let d = theta.len();
    let w = DVector::from_iterator(d, (0..d).map(|j| -(xd.z_x[j] + theta[j] * xd.v_x) / xd.v_xx));
    let sigma = model.coefficients().asset_vol(t, s, r);
    let y = if d == 1 {
        DVector::from_element(1, w[0] / sigma[(0, 0)])
    } else {
        sigma
            .transpose()
            .lu()
            .solve(&w)
            .ok_or(LabError::Singular { t, condition: f64::INFINITY })?
    };
    Ok(y.iter().zip(s).map(|(v, si)| v / si).collect())
}

/// Feedback rule `(t, x, s, r) -> holdings` read off the value function.
/// Evaluation failures surface as NaN holdings, which wealth integration
/// reports with their path and step.
pub fn strategy_from_value(value: Arc<ValueProcess>) -> StrategyRule {
    let d = value.model.asset_dim();
    StrategyRule::feedback(move |t, x, s, r| value.optimal_holdings(t, x, s, r).unwrap_or_else(|_| vec![f64::NAN; d]))
}
