use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use super::{CaseCertificate, CaseId, ClosedFormula, GridTransform, Representation, ValueProcess};
use crate::bsde::regression::Regressor;
use crate::bsde::{BsdeSolution, CurvePoint, DriverKind, KnotFit};
use crate::error::{LabError, Result};
use crate::market::{
    check_shape, market_price_of_risk, mean_stderr, mean_variance_tradeoff, MarketModel, PathEnsemble, PathProcess,
};
use crate::pde::{solve_linear, Coordinate, GridFunction, PdeKind, PdeSpec};
use crate::utility::{Claim, UtilitySpec};

/// Default bound on `|g|` for exponential claims on the state box.
pub const DEFAULT_CLAIM_BOUND: f64 = 1e3;

/// Basis degree for conditional expectations at `t > 0`.
pub const DEFAULT_DEGREE: usize = 3;

/// `|theta|^2` if it is the same at every probed time and state.
pub fn constant_theta_sq(model: &MarketModel, horizon: f64) -> Result<Option<f64>> {
    let lattice = model.state_box().lattice();
    let mut first: Option<f64> = None;
    for i in 0..5 {
        let t = horizon * i as f64 / 4.0;
        for (s, r) in lattice.iter().chain(std::iter::once(&(model.s0().to_vec(), model.r0().to_vec()))) {
            let th = market_price_of_risk(model, t, s, r)?.theta_sq();
            match first {
                None => first = Some(th),
                Some(f) if (th - f).abs() > 1e-12 * f.max(1.0) => return Ok(None),
                _ => {}
            }
        }
    }
    Ok(first)
}

fn constant_claim(claim: &Claim) -> Option<f64> {
    match claim {
        Claim::Zero => Some(0.0),
        Claim::Constant(c) => Some(*c),
        _ => None,
    }
}

/// Closed forms for constant `theta`: every family reduces to a scalar ODE.
pub fn closed_form(utility: &UtilitySpec, model: &MarketModel, horizon: f64) -> Result<ValueProcess> {
    let th2 = constant_theta_sq(model, horizon)?
        .ok_or_else(|| LabError::NotApplicable("closed forms need a constant market price of risk".into()))?;
    let (formula, rate, level) = match utility {
        UtilitySpec::Log => (ClosedFormula::LogMerton, 0.5 * th2, 0.0),
        UtilitySpec::Power { .. } => {
            let q = utility.conjugate_exponent().expect("power");
            (ClosedFormula::PowerCase2Deterministic, -0.5 * q * th2, 1.0)
        }
        UtilitySpec::Exponential { gamma, claim } => {
            let c = constant_claim(claim)
                .ok_or_else(|| LabError::NotApplicable("closed form needs a constant claim".into()))?;
            (ClosedFormula::ExponentialDeterministic, -0.5 * th2, (gamma * c).exp())
        }
        UtilitySpec::Quadratic { .. } => (ClosedFormula::QuadraticDeterministic, -th2, 1.0),
    };
    Ok(ValueProcess {
        utility: utility.clone(),
        model: model.clone(),
        horizon,
        representation: Representation::ClosedForm {
            formula,
            rate,
            level,
            power: 1.0,
        },
        certificate: None,
        diagnostics: Vec::new(),
    })
}

fn require_power(utility: &UtilitySpec) -> Result<f64> {
    utility
        .conjugate_exponent()
        .ok_or_else(|| LabError::NotApplicable("expected power utility".into()))
}

/// Largest change of `theta` when the factor moves across the state box.
fn factor_sensitivity(model: &MarketModel, horizon: f64) -> Result<f64> {
    if model.factor_dim() == 0 {
        return Ok(0.0);
    }
    let sb = model.state_box().clone();
    let mut worst: f64 = 0.0;
    for i in 0..5 {
        let t = horizon * i as f64 / 4.0;
        for (s, r) in sb.lattice() {
            let a = market_price_of_risk(model, t, &s, &r)?.theta;
            let b = market_price_of_risk(model, t, &s, model.r0())?.theta;
            worst = worst.max((a - b).amax());
        }
    }
    Ok(worst)
}

fn case1_certificate(model: &MarketModel, horizon: f64) -> Result<CaseCertificate> {
    let residual = factor_sensitivity(model, horizon)?;
    let structural = residual <= 1e-12;
    let warnings = if structural {
        Vec::new()
    } else {
        vec![format!("market price of risk moves by {residual:.3e} with the factor; Case 1 is not exact")]
    };
    Ok(CaseCertificate {
        case_id: CaseId::Case1MinimalMeasure,
        residual,
        structural,
        warnings,
    })
}

/// Inputs to the Case 1 power value.
#[derive(Debug, Clone)]
pub enum Case1Input {
    /// Deterministic `theta`: `v~(t) = exp(q(q-1)/2 |theta|^2 (T - t))`.
    Deterministic,
    /// A solved almost-complete grid `v~(t, log s)`.
    Pde(GridFunction),
}

/// `V_t = v~(t, S_t)^{1/(1-q)}`.
pub fn power_value_case1(utility: &UtilitySpec, model: &MarketModel, horizon: f64, input: Case1Input) -> Result<ValueProcess> {
    let q = require_power(utility)?;
    let certificate = case1_certificate(model, horizon)?;
    let representation = match input {
        Case1Input::Deterministic => {
            let th2 = constant_theta_sq(model, horizon)?
                .ok_or_else(|| LabError::NotApplicable("deterministic Case 1 needs a constant market price of risk".into()))?;
            Representation::ClosedForm {
                formula: ClosedFormula::PowerCase1Deterministic,
                rate: 0.5 * q * (q - 1.0) * th2,
                level: 1.0,
                power: 1.0 / (1.0 - q),
            }
        }
        Case1Input::Pde(grid) => {
            let low = grid.min();
            if !(low > 0.0) {
                return Err(LabError::Domain(format!("v~ reaches {low:.3e}; the fractional power is undefined")));
            }
            Representation::Grid {
                grid,
                coordinate: Coordinate::LogPrice,
                transform: GridTransform::Power { exponent: 1.0 / (1.0 - q) },
            }
        }
    };
    Ok(ValueProcess {
        utility: utility.clone(),
        model: model.clone(),
        horizon,
        representation,
        diagnostics: certificate.warnings.clone(),
        certificate: Some(certificate),
    })
}

/// Solves the almost-complete linear PDE and wraps it as a Case 1 value.
pub fn power_value_case1_pde(
    utility: &UtilitySpec,
    model: &MarketModel,
    horizon: f64,
    n_space: usize,
    n_time: usize,
) -> Result<ValueProcess> {
    let q = require_power(utility)?;
    let spec = PdeSpec::from_model(PdeKind::AlmostCompletePower { q }, Coordinate::LogPrice, model, horizon, n_space, n_time)?;
    let grid = solve_linear(&spec)?;
    let mut vp = power_value_case1(utility, model, horizon, Case1Input::Pde(grid))?;
    vp.diagnostics.extend(spec.warnings);
    Ok(vp)
}

/// Regression estimate of `E[F_k | state_k]` for a per-path functional.
struct Regressed {
    fits: Vec<KnotFit>,
    samples: PathProcess,
    curve: Vec<CurvePoint>,
    warnings: Vec<String>,
}

fn regress_functional<F>(ensemble: &PathEnsemble, degree: usize, functional: F) -> Result<Regressed>
where
    F: Fn(usize, usize) -> f64 + Sync,
{
    let grid = *ensemble.grid();
    let steps = grid.n_steps();
    let n_paths = ensemble.n_paths();
    let dims = ensemble.asset_dim() + ensemble.factor_dim();
    let n = ensemble.brownian_dim();
    let mut values = vec![0.0; n_paths * (steps + 1)];
    let mut fits = Vec::with_capacity(steps);
    let mut warnings = Vec::new();
    let mut curve = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let target: Vec<f64> = (0..n_paths).into_par_iter().map(|p| functional(p, k)).collect();
        let fitted = if k == steps {
            target.clone()
        } else {
            let mut feats = vec![0.0; n_paths * dims];
            feats.par_chunks_mut(dims.max(1)).enumerate().for_each(|(p, row)| {
                let mut buf = Vec::with_capacity(dims);
                ensemble.state_features(p, k, &mut buf);
                row.copy_from_slice(&buf);
            });
            let reg = Regressor::new(&feats, dims, degree)?;
            warnings.extend(reg.warnings().iter().map(|w| format!("t={}: {w}", grid.time(k))));
            let (coefs, fitted) = reg.fit(&target)?;
            fits.push(KnotFit {
                basis: reg.basis().clone(),
                value: coefs,
                integrand: vec![vec![0.0; reg.basis().len()]; n],
            });
            fitted
        };
        let (mean, stderr) = mean_stderr(&target);
        curve.push(CurvePoint {
            t: grid.time(k),
            mean,
            stderr,
        });
        for (p, v) in fitted.into_iter().enumerate() {
            values[p * (steps + 1) + k] = v;
        }
    }
    Ok(Regressed {
        fits,
        samples: PathProcess::from_values(n_paths, steps + 1, values)?,
        curve,
        warnings,
    })
}

/// Whether the market price of risk is orthogonal to the assets by
/// construction: no factor loading on the asset noise and no price
/// dependence.
fn orthogonal_by_construction(model: &MarketModel, horizon: f64) -> Result<bool> {
    if constant_theta_sq(model, horizon)?.is_some() {
        return Ok(true);
    }
    let coeffs = model.coefficients();
    let lattice = model.state_box().lattice();
    for (s, r) in &lattice {
        if coeffs.factor_loading(0.0, s, r).amax() > 0.0 {
            return Ok(false);
        }
        let a = market_price_of_risk(model, 0.0, s, r)?.theta;
        let b = market_price_of_risk(model, 0.0, model.s0(), r)?.theta;
        if (a - b).amax() > 1e-12 {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Largest `|corr(F, W^l_T)|` over the asset coordinates.
fn orthogonality_residual(ensemble: &PathEnsemble, functional: &[f64]) -> f64 {
    let n_paths = ensemble.n_paths();
    let steps = ensemble.grid().n_steps();
    let (mf, _) = mean_stderr(functional);
    let mut worst: f64 = 0.0;
    for j in 0..ensemble.asset_dim() {
        let w: Vec<f64> = (0..n_paths).map(|p| (0..steps).map(|k| ensemble.dw(p, k)[j]).sum()).collect();
        let (mw, _) = mean_stderr(&w);
        let (mut sfw, mut sff, mut sww) = (0.0, 0.0, 0.0);
        for (f, x) in functional.iter().zip(&w) {
            sfw += (f - mf) * (x - mw);
            sff += (f - mf).powi(2);
            sww += (x - mw).powi(2);
        }
        if sff > 0.0 && sww > 0.0 {
            worst = worst.max((sfw / (sff * sww).sqrt()).abs());
        }
    }
    worst
}

/// Case 2 style value `V_t = E[terminal exp(-c int_t^T |theta|^2) | F_t]`
/// with `c` the generator coefficient of the family, conditional
/// expectations by regression. The asset part of the integrand vanishes by
/// hypothesis.
pub fn orthogonal_value(
    utility: &UtilitySpec,
    model: &MarketModel,
    ensemble: &PathEnsemble,
    degree: usize,
) -> Result<ValueProcess> {
    check_shape(ensemble, model)?;
    let kind = DriverKind::for_utility(utility)?;
    let c = kind.coefficient();
    let grid = *ensemble.grid();
    let steps = grid.n_steps();
    let horizon = grid.horizon();
    let tradeoff = mean_variance_tradeoff(ensemble, model)?;
    let terminal: Vec<f64> = (0..ensemble.n_paths())
        .map(|p| match utility {
            UtilitySpec::Exponential { gamma, claim } => (gamma * claim.eval(ensemble.s(p, steps), ensemble.r(p, steps))).exp(),
            _ => 1.0,
        })
        .collect();
    let functional = |p: usize, k: usize| {
        let tail = tradeoff.get(p, steps) - tradeoff.get(p, k);
        terminal[p] * (-c * tail).exp()
    };
    let reg = regress_functional(ensemble, degree, functional)?;
    let f0: Vec<f64> = (0..ensemble.n_paths()).map(|p| functional(p, 0)).collect();
    let residual = orthogonality_residual(ensemble, &f0);
    let structural = orthogonal_by_construction(model, horizon)?;
    let mut cert_warnings = Vec::new();
    if !structural {
        cert_warnings.push(format!(
            "market price of risk is not orthogonal to the assets by construction; measured residual {residual:.3e}"
        ));
    }
    let mut diagnostics = reg.warnings;
    diagnostics.extend(cert_warnings.iter().cloned());
    let low = reg.samples.min();
    if !(low > 0.0) {
        diagnostics.push(format!("regressed value factor reaches {low:.3e}"));
    }
    Ok(ValueProcess {
        utility: utility.clone(),
        model: model.clone(),
        horizon,
        representation: Representation::PathSamples {
            grid,
            fits: reg.fits,
            samples: reg.samples,
            curve: reg.curve,
        },
        certificate: Some(CaseCertificate {
            case_id: CaseId::Case2Orthogonal,
            residual,
            structural,
            warnings: cert_warnings,
        }),
        diagnostics,
    })
}

/// `Y_t = E[exp(-(q/2) int_t^T |theta|^2) | F_t]`.
pub fn power_value_case2(
    utility: &UtilitySpec,
    model: &MarketModel,
    ensemble: &PathEnsemble,
    degree: usize,
) -> Result<ValueProcess> {
    require_power(utility)?;
    orthogonal_value(utility, model, ensemble, degree)
}

/// `Y_t = v(t, R_t)` from the linear factor equation with potential
/// `-(q/2) theta^2`. Exact when the factor is orthogonal to the assets.
pub fn power_value_factor_pde(
    utility: &UtilitySpec,
    model: &MarketModel,
    horizon: f64,
    n_space: usize,
    n_time: usize,
) -> Result<ValueProcess> {
    let q = require_power(utility)?;
    let spec = PdeSpec::from_model(PdeKind::FactorPower { q }, Coordinate::Factor, model, horizon, n_space, n_time)?;
    let grid = solve_linear(&spec)?;
    let low = grid.min();
    if !(low > 0.0) {
        return Err(LabError::Domain(format!("factor value reaches {low:.3e}")));
    }
    Ok(ValueProcess {
        utility: utility.clone(),
        model: model.clone(),
        horizon,
        representation: Representation::Grid {
            grid,
            coordinate: Coordinate::Factor,
            transform: GridTransform::Identity,
        },
        certificate: None,
        diagnostics: spec.warnings,
    })
}

/// Wraps a backward solver run as a value process.
pub fn from_bsde(utility: &UtilitySpec, model: &MarketModel, solution: &BsdeSolution) -> Result<ValueProcess> {
    let kind = DriverKind::for_utility(utility)?;
    if kind != solution.kind {
        return Err(LabError::Config(format!("solution generator {:?} does not match the utility", solution.kind)));
    }
    let mut diagnostics = solution.diagnostics.warnings.clone();
    if matches!(utility, UtilitySpec::Quadratic { .. }) {
        let (lo, hi) = (solution.diagnostics.min_v, solution.diagnostics.max_v);
        if lo <= 0.0 || hi > 1.0 + 1e-6 {
            diagnostics.push(format!("quadratic value factor spans [{lo:.6}, {hi:.6}], outside (0, 1]"));
        }
    }
    Ok(ValueProcess {
        utility: utility.clone(),
        model: model.clone(),
        horizon: solution.grid.horizon(),
        representation: Representation::PathSamples {
            grid: solution.grid,
            fits: solution.fits.clone(),
            samples: solution.v.clone(),
            curve: solution.value_curve.clone(),
        },
        certificate: None,
        diagnostics,
    })
}

/// Inputs to the exponential value.
#[derive(Debug, Clone, Copy)]
pub enum ExponentialInputs<'a> {
    ClosedForm,
    /// Linear equation for the exponent under the minimal martingale measure.
    Case1 { coordinate: Coordinate, n_space: usize, n_time: usize },
    /// Regression of `exp(gamma H - int theta^2 / 2)`.
    Case2 { ensemble: &'a PathEnsemble, degree: usize },
    Bsde(&'a BsdeSolution),
}

pub fn exponential_value(
    utility: &UtilitySpec,
    model: &MarketModel,
    horizon: f64,
    inputs: ExponentialInputs<'_>,
    claim_bound: f64,
) -> Result<ValueProcess> {
    let UtilitySpec::Exponential { gamma, claim } = utility else {
        return Err(LabError::NotApplicable("expected exponential utility".into()));
    };
    let probes = model.state_box().lattice();
    claim.check_bounded(&probes, claim_bound)?;
    match inputs {
        ExponentialInputs::ClosedForm => closed_form(utility, model, horizon),
        ExponentialInputs::Case1 { coordinate, n_space, n_time } => {
            let certificate = case1_certificate(model, horizon)?;
            let gamma = *gamma;
            let claim = claim.clone();
            let (s0, r0) = (model.s0().to_vec(), model.r0().to_vec());
            let terminal: Arc<dyn Fn(f64) -> f64 + Send + Sync> = match coordinate {
                Coordinate::LogPrice => Arc::new(move |y: f64| {
                    let mut s = s0.clone();
                    s[0] = y.exp();
                    gamma * claim.eval(&s, &r0)
                }),
                Coordinate::Factor => Arc::new(move |x: f64| {
                    let mut r = r0.clone();
                    r[0] = x;
                    gamma * claim.eval(&s0, &r)
                }),
            };
            let spec = PdeSpec::from_model(PdeKind::ExponentialMinimal { gamma }, coordinate, model, horizon, n_space, n_time)?
                .with_terminal(terminal);
            let grid = solve_linear(&spec)?;
            let mut diagnostics = spec.warnings.clone();
            diagnostics.extend(certificate.warnings.iter().cloned());
            Ok(ValueProcess {
                utility: utility.clone(),
                model: model.clone(),
                horizon,
                representation: Representation::Grid {
                    grid,
                    coordinate,
                    transform: GridTransform::Exp,
                },
                certificate: Some(certificate),
                diagnostics,
            })
        }
        ExponentialInputs::Case2 { ensemble, degree } => orthogonal_value(utility, model, ensemble, degree),
        ExponentialInputs::Bsde(solution) => from_bsde(utility, model, solution),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuadraticValue {
    pub value: f64,
    pub factor: f64,
    pub warnings: Vec<String>,
}

/// `b^2 - (x - b)^2 V_t` from a backward solver run.
pub fn quadratic_value(
    utility: &UtilitySpec,
    model: &MarketModel,
    solution: &BsdeSolution,
    t: f64,
    x: f64,
    s: &[f64],
    r: &[f64],
) -> Result<QuadraticValue> {
    if !matches!(utility, UtilitySpec::Quadratic { .. }) {
        return Err(LabError::NotApplicable("expected quadratic utility".into()));
    }
    let vp = from_bsde(utility, model, solution)?;
    let factor = vp.factor(t, s, r)?;
    let mut warnings = vp.diagnostics.clone();
    if !(factor > 0.0 && factor <= 1.0 + 1e-6) {
        warnings.push(format!("value factor {factor:.6} outside (0, 1]"));
    }
    Ok(QuadraticValue {
        value: vp.value(t, x, s, r)?,
        factor,
        warnings,
    })
}

/// Source of the additive log part `E[int_t^T |theta|^2 / 2 | F_t]`.
#[derive(Debug, Clone, Copy)]
pub enum LogSource<'a> {
    ClosedForm,
    Ensemble { ensemble: &'a PathEnsemble, degree: usize },
    Pde { coordinate: Coordinate, n_space: usize, n_time: usize },
}

pub fn log_value(model: &MarketModel, horizon: f64, source: LogSource<'_>) -> Result<ValueProcess> {
    let utility = UtilitySpec::Log;
    match source {
        LogSource::ClosedForm => closed_form(&utility, model, horizon),
        LogSource::Ensemble { ensemble, degree } => {
            check_shape(ensemble, model)?;
            let grid = *ensemble.grid();
            let steps = grid.n_steps();
            let tradeoff = mean_variance_tradeoff(ensemble, model)?;
            let reg = regress_functional(ensemble, degree, |p, k| 0.5 * (tradeoff.get(p, steps) - tradeoff.get(p, k)))?;
            Ok(ValueProcess {
                utility,
                model: model.clone(),
                horizon: grid.horizon(),
                representation: Representation::PathSamples {
                    grid,
                    fits: reg.fits,
                    samples: reg.samples,
                    curve: reg.curve,
                },
                certificate: None,
                diagnostics: reg.warnings,
            })
        }
        LogSource::Pde { coordinate, n_space, n_time } => {
            let spec = PdeSpec::from_model(PdeKind::LogLinear, coordinate, model, horizon, n_space, n_time)?;
            let grid = solve_linear(&spec)?;
            Ok(ValueProcess {
                utility,
                model: model.clone(),
                horizon,
                representation: Representation::Grid {
                    grid,
                    coordinate,
                    transform: GridTransform::Identity,
                },
                certificate: None,
                diagnostics: spec.warnings,
            })
        }
    }
}

/// Log value under both sign readings of the additive part.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogValueReport {
    /// `log x + E[int_t^T |theta|^2 / 2 | F_t]`, the reading consistent with
    /// the backward equation.
    pub value: f64,
    /// `log x - E[...]`, reported for comparison only.
    pub opposite_sign: f64,
    pub tradeoff_part: f64,
}

pub fn log_value_at(value: &ValueProcess, t: f64, x: f64, s: &[f64], r: &[f64]) -> Result<LogValueReport> {
    if !value.is_additive() {
        return Err(LabError::NotApplicable("expected a log value process".into()));
    }
    if !(x > 0.0) {
        return Err(LabError::Domain(format!("wealth must be positive, got {x}")));
    }
    let part = value.factor(t, s, r)?;
    Ok(LogValueReport {
        value: x.ln() + part,
        opposite_sign: x.ln() - part,
        tradeoff_part: part,
    })
}

/// Log-optimal wealth `x E(lambda . S)` on an ensemble.
pub fn log_optimal_wealth(ensemble: &PathEnsemble, model: &MarketModel, x0: f64) -> Result<PathProcess> {
    check_shape(ensemble, model)?;
    let grid = *ensemble.grid();
    let steps = grid.n_steps();
    let rows: Vec<Result<Vec<f64>>> = (0..ensemble.n_paths())
        .into_par_iter()
        .map(|p| {
            let mut out = Vec::with_capacity(steps + 1);
            let mut log = 0.0;
            out.push(x0);
            for k in 0..steps {
                let (s, s_next) = (ensemble.s(p, k), ensemble.s(p, k + 1));
                let rp = market_price_of_risk(model, grid.time(k), s, ensemble.r(p, k))?;
                let dn: f64 = rp.lambda.iter().zip(s.iter().zip(s_next)).map(|(l, (a, b))| l * (b - a)).sum();
                log += dn - 0.5 * rp.theta_sq() * grid.dt();
                out.push(x0 * log.exp());
            }
            Ok(out)
        })
        .collect();
    let mut values = Vec::with_capacity(ensemble.n_paths() * (steps + 1));
    for row in rows {
        values.extend(row?);
    }
    PathProcess::from_values(ensemble.n_paths(), steps + 1, values)
}
