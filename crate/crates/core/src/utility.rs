//! The four utility families and numerical probes of their qualitative
//! properties (concavity, Inada, asymptotic elasticity).

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

pub type ClaimFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;

/// Terminal claim `H = g(S_T, R_T)` paid out under exponential utility.
#[derive(Clone)]
pub enum Claim {
    Zero,
    Constant(f64),
    /// `amplitude * tanh(slope * (r_0 - centre))`.
    FactorTanh { amplitude: f64, slope: f64, centre: f64 },
    /// `min(max(s_0 - strike, 0), cap)`.
    CappedCall { strike: f64, cap: f64 },
    Custom(ClaimFn),
}

impl fmt::Debug for Claim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Claim::Zero => f.write_str("Zero"),
            Claim::Constant(c) => write!(f, "Constant({c})"),
            Claim::FactorTanh { amplitude, slope, centre } => {
                write!(f, "FactorTanh({amplitude}, {slope}, {centre})")
            }
            Claim::CappedCall { strike, cap } => write!(f, "CappedCall({strike}, {cap})"),
            Claim::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

impl Claim {
    pub fn eval(&self, s: &[f64], r: &[f64]) -> f64 {
        match self {
            Claim::Zero => 0.0,
            Claim::Constant(c) => *c,
            Claim::FactorTanh { amplitude, slope, centre } => {
                let x = r.first().copied().unwrap_or(0.0);
                amplitude * (slope * (x - centre)).tanh()
            }
            Claim::CappedCall { strike, cap } => {
                let x = s.first().copied().unwrap_or(0.0);
                (x - strike).max(0.0).min(*cap)
            }
            Claim::Custom(g) => g(s, r),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Claim::Zero) || matches!(self, Claim::Constant(c) if *c == 0.0)
    }

    /// Rejects claims exceeding `bound` in absolute value at any probe state.
    pub fn check_bounded(&self, probes: &[(Vec<f64>, Vec<f64>)], bound: f64) -> Result<()> {
        for (s, r) in probes {
            let g = self.eval(s, r);
            if !g.is_finite() || g.abs() > bound {
                return Err(LabError::ModelValidation(format!(
                    "claim value {g} exceeds the bound {bound} at s={s:?}, r={r:?}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum UtilitySpec {
    Power { p: f64 },
    Log,
    Exponential { gamma: f64, claim: Claim },
    Quadratic { b: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UtilityFamily {
    Power,
    Log,
    Exponential,
    Quadratic,
}

/// `(U, U', U'')` at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Derivatives {
    pub u: f64,
    pub du: f64,
    pub d2u: f64,
}

impl UtilitySpec {
    pub fn power(p: f64) -> Result<Self> {
        if !(p > 0.0 && p < 1.0) {
            return Err(LabError::Config(format!("power utility needs p in (0, 1), got {p}")));
        }
        Ok(UtilitySpec::Power { p })
    }

    pub fn exponential(gamma: f64, claim: Claim) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(LabError::Config(format!("risk aversion must be positive, got {gamma}")));
        }
        Ok(UtilitySpec::Exponential { gamma, claim })
    }

    pub fn quadratic(b: f64) -> Result<Self> {
        if !(b > 0.0 && b.is_finite()) {
            return Err(LabError::Config(format!("quadratic target must be positive, got {b}")));
        }
        Ok(UtilitySpec::Quadratic { b })
    }

    pub fn family(&self) -> UtilityFamily {
        match self {
            UtilitySpec::Power { .. } => UtilityFamily::Power,
            UtilitySpec::Log => UtilityFamily::Log,
            UtilitySpec::Exponential { .. } => UtilityFamily::Exponential,
            UtilitySpec::Quadratic { .. } => UtilityFamily::Quadratic,
        }
    }

    /// `q = p / (p - 1)` for power utility.
    pub fn conjugate_exponent(&self) -> Option<f64> {
        match self {
            UtilitySpec::Power { p } => Some(p / (p - 1.0)),
            _ => None,
        }
    }

    pub fn positive_domain(&self) -> bool {
        matches!(self, UtilitySpec::Power { .. } | UtilitySpec::Log)
    }

    pub fn evaluate(&self, x: f64) -> Result<Derivatives> {
        if self.positive_domain() && !(x > 0.0) {
            return Err(LabError::Domain(format!("utility is -inf for wealth {x} <= 0")));
        }
        Ok(match self {
            UtilitySpec::Power { p } => {
                let u = x.powf(*p);
                Derivatives {
                    u,
                    du: p * u / x,
                    d2u: p * (p - 1.0) * u / (x * x),
                }
            }
            UtilitySpec::Log => Derivatives {
                u: x.ln(),
                du: 1.0 / x,
                d2u: -1.0 / (x * x),
            },
            // at fixed claim H = 0; see `terminal_utility` for the claim
            UtilitySpec::Exponential { gamma, .. } => {
                let e = (-gamma * x).exp();
                Derivatives {
                    u: -e,
                    du: gamma * e,
                    d2u: -gamma * gamma * e,
                }
            }
            UtilitySpec::Quadratic { b } => Derivatives {
                u: 2.0 * b * x - x * x,
                du: 2.0 * (b - x),
                d2u: -2.0,
            },
        })
    }

    /// `U(x)` at maturity, including the claim for exponential utility.
    pub fn terminal_utility(&self, x: f64, s: &[f64], r: &[f64]) -> f64 {
        match self {
            UtilitySpec::Exponential { gamma, claim } => -(-gamma * (x - claim.eval(s, r))).exp(),
            UtilitySpec::Power { .. } | UtilitySpec::Log if !(x > 0.0) => f64::NEG_INFINITY,
            _ => self.evaluate(x).map(|d| d.u).unwrap_or(f64::NEG_INFINITY),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ElasticityReport {
    /// `x U'(x) / U(x)` on `x = 10^2, ..., 10^8`.
    pub samples: Vec<(f64, f64)>,
    /// Largest sample over the upper half of the grid.
    pub numeric: f64,
    pub analytic: f64,
    pub below_one: bool,
}

/// Asymptotic elasticity, numerically on a geometric grid and analytically.
pub fn asymptotic_elasticity(spec: &UtilitySpec) -> Result<ElasticityReport> {
    let analytic = match spec {
        UtilitySpec::Power { p } => *p,
        UtilitySpec::Log => 0.0,
        _ => {
            return Err(LabError::NotApplicable(
                "asymptotic elasticity is defined for utilities on the positive half-line".into(),
            ))
        }
    };
    let samples: Vec<(f64, f64)> = (2..=8)
        .map(|e| {
            let x = 10f64.powi(e);
            let d = spec.evaluate(x).expect("positive grid");
            (x, x * d.du / d.u)
        })
        .collect();
    let numeric = samples[samples.len() / 2..]
        .iter()
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(ElasticityReport {
        samples,
        numeric,
        analytic,
        below_one: numeric < 1.0 && analytic < 1.0,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ConcavityReport {
    pub points: usize,
    pub max_relative_fd_error: f64,
    pub strictly_concave: bool,
    pub passed: bool,
}

/// Central second difference with step `h`.
pub fn second_difference(spec: &UtilitySpec, x: f64, h: f64) -> Result<f64> {
    let up = spec.evaluate(x + h)?.u;
    let mid = spec.evaluate(x)?.u;
    let dn = spec.evaluate(x - h)?.u;
    Ok((up - 2.0 * mid + dn) / (h * h))
}

/// Checks `U'' < 0` and agreement of `U''` with a central difference at the
/// interior points of `grid`.
pub fn concavity_probe(spec: &UtilitySpec, grid: &[f64]) -> Result<ConcavityReport> {
    const REL_TOL: f64 = 1e-6;
    let mut max_err: f64 = 0.0;
    let mut concave = true;
    let interior = if grid.len() > 2 { &grid[1..grid.len() - 1] } else { grid };
    for &x in interior {
        let d = spec.evaluate(x)?;
        concave &= d.d2u < 0.0;
        let h = 1e-4 * x.abs().max(1.0);
        let fd = second_difference(spec, x, h)?;
        max_err = max_err.max((fd - d.d2u).abs() / d.d2u.abs().max(f64::MIN_POSITIVE));
    }
    Ok(ConcavityReport {
        points: interior.len(),
        max_relative_fd_error: max_err,
        strictly_concave: concave,
        passed: concave && max_err <= REL_TOL,
    })
}
