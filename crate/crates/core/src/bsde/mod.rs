//! Backward regression Monte Carlo for the scalar quadratic BSDEs satisfied
//! by the multiplicative value factors of power, exponential and quadratic
//! utility.
//!
//! The martingale integrand is carried in Brownian coordinates: with
//! `phi . dM = Z . dW` the generator `c (phi + lambda V)' d<M> (phi + lambda V) / V`
//! becomes `c |Z^l + theta V|^2 / V dt`, where `Z^l` are the asset
//! coordinates of `Z`. The factor coordinates of `Z` belong to the part
//! orthogonal to the assets and do not enter the generator.

pub mod regression;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{LabError, Result};
use crate::market::{check_shape, market_price_of_risk, mean_stderr, MarketModel, PathEnsemble, PathProcess, TimeGrid};
use crate::utility::UtilitySpec;
use regression::{predict, PolynomialBasis, Regressor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DriverKind {
    Power { q: f64 },
    Exponential,
    Quadratic,
}

impl DriverKind {
    pub fn for_utility(utility: &UtilitySpec) -> Result<Self> {
        match utility {
            UtilitySpec::Power { .. } => Ok(DriverKind::Power {
                q: utility.conjugate_exponent().expect("power"),
            }),
            UtilitySpec::Exponential { .. } => Ok(DriverKind::Exponential),
            UtilitySpec::Quadratic { .. } => Ok(DriverKind::Quadratic),
            UtilitySpec::Log => Err(LabError::NotApplicable(
                "log utility has an additive value process; use the closed form".into(),
            )),
        }
    }

    pub fn coefficient(&self) -> f64 {
        match self {
            DriverKind::Power { q } => 0.5 * q,
            DriverKind::Exponential => 0.5,
            DriverKind::Quadratic => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriverRate {
    pub rate: f64,
    pub clamped: bool,
}

/// Forward drift per unit time `c |z + theta v|^2 / v`, with `v` clamped at
/// `floor`. `z` holds the asset coordinates of the integrand.
pub fn driver_rate(kind: DriverKind, v: f64, z: &[f64], theta: &[f64], floor: f64) -> DriverRate {
    let clamped = v < floor;
    let v = if clamped { floor } else { v };
    let sq: f64 = z.iter().zip(theta).map(|(zi, th)| (zi + th * v).powi(2)).sum();
    DriverRate {
        rate: kind.coefficient() * sq / v,
        clamped,
    }
}

#[derive(Debug, Clone)]
pub struct BsdeProblem<'a> {
    pub kind: DriverKind,
    pub terminal: Vec<f64>,
    pub model: &'a MarketModel,
    pub ensemble: &'a PathEnsemble,
}

impl<'a> BsdeProblem<'a> {
    pub fn new(kind: DriverKind, terminal: Vec<f64>, model: &'a MarketModel, ensemble: &'a PathEnsemble) -> Result<Self> {
        check_shape(ensemble, model)?;
        if terminal.len() != ensemble.n_paths() {
            return Err(LabError::Shape(format!(
                "{} terminal values for {} paths",
                terminal.len(),
                ensemble.n_paths()
            )));
        }
        if let Some(bad) = terminal.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(LabError::ModelValidation(format!("terminal value must be positive, got {bad}")));
        }
        Ok(Self {
            kind,
            terminal,
            model,
            ensemble,
        })
    }

    /// Terminal condition 1 (power, quadratic) or `exp(gamma H)` (exponential).
    pub fn for_utility(utility: &UtilitySpec, model: &'a MarketModel, ensemble: &'a PathEnsemble) -> Result<Self> {
        let kind = DriverKind::for_utility(utility)?;
        let last = ensemble.grid().n_steps();
        let terminal = (0..ensemble.n_paths())
            .map(|p| match utility {
                UtilitySpec::Exponential { gamma, claim } => {
                    (gamma * claim.eval(ensemble.s(p, last), ensemble.r(p, last))).exp()
                }
                _ => 1.0,
            })
            .collect();
        Self::new(kind, terminal, model, ensemble)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BsdeOptions {
    pub basis_degree: usize,
    pub picard_iters: usize,
    pub divergence_threshold: f64,
    pub max_floor_fraction: f64,
}

impl Default for BsdeOptions {
    fn default() -> Self {
        Self {
            basis_degree: 3,
            picard_iters: 3,
            divergence_threshold: 10.0,
            max_floor_fraction: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub t: f64,
    pub mean: f64,
    pub stderr: f64,
}

/// Regression coefficients of `V_k` and `Z_k` as functions of the state.
#[derive(Debug, Clone)]
pub struct KnotFit {
    pub basis: PolynomialBasis,
    pub value: Vec<f64>,
    pub integrand: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BsdeDiagnostics {
    pub floor: f64,
    pub floor_activations: usize,
    pub driver_clamps: usize,
    pub min_v: f64,
    pub max_v: f64,
    pub max_condition: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct BsdeSolution {
    pub kind: DriverKind,
    pub grid: TimeGrid,
    pub v: PathProcess,
    /// `n_paths x n_steps x n` integrand in Brownian coordinates.
    pub z: Vec<f64>,
    pub brownian_dim: usize,
    pub value_curve: Vec<CurvePoint>,
    /// Per-step RMS of `V_{k+1} - E_k V_{k+1} - Z_k . dW_k`.
    pub residual_orthogonal: Vec<f64>,
    pub fits: Vec<KnotFit>,
    pub diagnostics: BsdeDiagnostics,
}

impl BsdeSolution {
    pub fn z_at(&self, path: usize, k: usize) -> &[f64] {
        let n = self.brownian_dim;
        let at = (path * self.grid.n_steps() + k) * n;
        &self.z[at..at + n]
    }

    pub fn v0(&self) -> CurvePoint {
        self.value_curve[0]
    }

    /// Regression estimate of `V_k` at a state `(log s, r)`.
    pub fn value_at(&self, k: usize, features: &[f64]) -> f64 {
        let fit = &self.fits[k];
        predict(&fit.basis, &fit.value, features)
    }

    pub fn integrand_at(&self, k: usize, features: &[f64]) -> Vec<f64> {
        let fit = &self.fits[k];
        fit.integrand.iter().map(|c| predict(&fit.basis, c, features)).collect()
    }
}

pub fn solve(problem: &BsdeProblem<'_>, options: &BsdeOptions) -> Result<BsdeSolution> {
    let ens = problem.ensemble;
    let model = problem.model;
    let grid = *ens.grid();
    let steps = grid.n_steps();
    let dt = grid.dt();
    let n_paths = ens.n_paths();
    let n = ens.brownian_dim();
    let d = ens.asset_dim();
    let dims = n;
    if n_paths < 1000 {
        return Err(LabError::Config(format!("the regression solver needs at least 1000 paths, got {n_paths}")));
    }
    let floor = 1e-8 * problem.terminal.iter().cloned().fold(f64::INFINITY, f64::min);

    let mut v_all = vec![0.0; n_paths * (steps + 1)];
    let mut z_all = vec![0.0; n_paths * steps * n];
    for (p, v) in problem.terminal.iter().enumerate() {
        v_all[p * (steps + 1) + steps] = *v;
    }
    let mut next: Vec<f64> = problem.terminal.clone();
    let mut residual_orthogonal = vec![0.0; steps];
    let mut fits: Vec<Option<KnotFit>> = vec![None; steps];
    let mut warnings = Vec::new();
    let mut floor_activations = 0usize;
    let mut driver_clamps = 0usize;
    let mut max_condition: f64 = 1.0;

    for k in (0..steps).rev() {
        let t = grid.time(k);
        let mut features = vec![0.0; n_paths * dims];
        features.par_chunks_mut(dims).enumerate().for_each(|(p, row)| {
            let mut buf = Vec::with_capacity(dims);
            ens.state_features(p, k, &mut buf);
            row.copy_from_slice(&buf);
        });
        let reg = Regressor::new(&features, dims, options.basis_degree)?;
        for w in reg.warnings() {
            warnings.push(format!("t={t}: {w}"));
        }
        max_condition = max_condition.max(reg.condition());

        let (_, cond_mean) = reg.fit(&next)?;
        let mut z_coefs = Vec::with_capacity(n);
        let mut z_k = vec![0.0; n_paths * n];
        for j in 0..n {
            let target: Vec<f64> = (0..n_paths)
                .into_par_iter()
                .map(|p| (next[p] - cond_mean[p]) * ens.dw(p, k)[j] / dt)
                .collect();
            let (c, fitted) = reg.fit(&target)?;
            for (p, v) in fitted.into_iter().enumerate() {
                z_k[p * n + j] = v;
            }
            z_coefs.push(c);
        }

        let thetas: Vec<Vec<f64>> = (0..n_paths)
            .into_par_iter()
            .map(|p| market_price_of_risk(model, t, ens.s(p, k), ens.r(p, k)).map(|rp| rp.theta.iter().cloned().collect()))
            .collect::<Result<_>>()?;

        let mut v = cond_mean.clone();
        for _ in 0..options.picard_iters {
            let updated: Vec<(f64, bool)> = (0..n_paths)
                .into_par_iter()
                .map(|p| {
                    let z = &z_k[p * n..p * n + d];
                    let r = driver_rate(problem.kind, v[p], z, &thetas[p], floor);
                    (cond_mean[p] - r.rate * dt, r.clamped)
                })
                .collect();
            let mut change: f64 = 0.0;
            for (p, (nv, clamped)) in updated.into_iter().enumerate() {
                change = change.max((nv - v[p]).abs());
                driver_clamps += clamped as usize;
                v[p] = nv;
            }
            if !(change <= options.divergence_threshold) {
                return Err(LabError::Divergence { step: k, change });
            }
        }
        for x in v.iter_mut() {
            if *x < floor {
                *x = floor;
                floor_activations += 1;
            }
        }

        let rss: f64 = (0..n_paths)
            .map(|p| {
                let mart: f64 = z_k[p * n..(p + 1) * n].iter().zip(ens.dw(p, k)).map(|(a, b)| a * b).sum();
                (next[p] - cond_mean[p] - mart).powi(2)
            })
            .sum();
        residual_orthogonal[k] = (rss / n_paths as f64).sqrt();

        let (v_coefs, _) = reg.fit(&v)?;
        fits[k] = Some(KnotFit {
            basis: reg.basis().clone(),
            value: v_coefs,
            integrand: z_coefs,
        });

        for p in 0..n_paths {
            v_all[p * (steps + 1) + k] = v[p];
            z_all[(p * steps + k) * n..(p * steps + k + 1) * n].copy_from_slice(&z_k[p * n..(p + 1) * n]);
        }
        next = v;
    }

    let total = n_paths * (steps + 1);
    if floor_activations as f64 > options.max_floor_fraction * total as f64 {
        return Err(LabError::SolverQuality(format!(
            "positivity floor hit on {floor_activations} of {total} samples"
        )));
    }

    let v = PathProcess::from_values(n_paths, steps + 1, v_all)?;
    let value_curve = (0..=steps)
        .map(|k| {
            let (mean, stderr) = v.mean_stderr(k);
            CurvePoint {
                t: grid.time(k),
                mean,
                stderr,
            }
        })
        .collect();
    let (min_v, max_v) = v
        .values()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(*x), b.max(*x)));

    Ok(BsdeSolution {
        kind: problem.kind,
        grid,
        v,
        z: z_all,
        brownian_dim: n,
        value_curve,
        residual_orthogonal,
        fits: fits.into_iter().map(|f| f.expect("every step fitted")).collect(),
        diagnostics: BsdeDiagnostics {
            floor,
            floor_activations,
            driver_clamps,
            min_v,
            max_v,
            max_condition,
            warnings,
        },
    })
}

/// Per-knot `(t, mean V, stderr)`.
pub fn value_curve(solution: &BsdeSolution) -> Vec<CurvePoint> {
    solution.value_curve.clone()
}

/// Root-mean-square of the integrand samples over all paths and steps.
pub fn integrand_rms(solution: &BsdeSolution) -> f64 {
    let n = solution.z.len().max(1) as f64;
    (solution.z.iter().map(|z| z * z).sum::<f64>() / n).sqrt()
}

pub fn terminal_mean(problem: &BsdeProblem<'_>) -> f64 {
    mean_stderr(&problem.terminal).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{simulate_paths, TimeGrid};
    use approx::assert_relative_eq;

    #[test]
    fn driver_examples() {
        let r = driver_rate(DriverKind::Power { q: -1.0 }, 1.0, &[0.0], &[0.5], 1e-8);
        assert_relative_eq!(r.rate, -0.125);
        for kind in [DriverKind::Power { q: -1.0 }, DriverKind::Exponential, DriverKind::Quadratic] {
            assert_eq!(driver_rate(kind, 2.0, &[-1.0], &[0.5], 1e-8).rate, 0.0);
        }
        let r = driver_rate(DriverKind::Exponential, 2.0, &[0.1], &[0.5], 1e-8);
        assert_relative_eq!(r.rate, 0.3025, epsilon = 1e-15);
        let r = driver_rate(DriverKind::Quadratic, -1.0, &[0.0], &[0.5], 1e-3);
        assert!(r.clamped);
        assert_relative_eq!(r.rate, 0.25e-3, epsilon = 1e-18);
    }

    #[test]
    fn zero_theta_keeps_unit_value() {
        let model = MarketModel::black_scholes(0.0, 0.2, 1.0).unwrap();
        let ens = simulate_paths(&model, TimeGrid::new(1.0, 10).unwrap(), 2000, 8).unwrap();
        for kind in [DriverKind::Power { q: -1.0 }, DriverKind::Exponential, DriverKind::Quadratic] {
            let prob = BsdeProblem::new(kind, vec![1.0; 2000], &model, &ens).unwrap();
            let sol = solve(&prob, &BsdeOptions::default()).unwrap();
            assert!(sol.v.values().iter().all(|v| (v - 1.0).abs() <= 1e-10));
            assert!(sol.z.iter().all(|z| z.abs() <= 1e-10));
            for c in value_curve(&sol) {
                assert!((c.mean - 1.0).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn rejects_small_ensembles_and_bad_terminals() {
        let model = MarketModel::black_scholes(0.1, 0.2, 1.0).unwrap();
        let ens = simulate_paths(&model, TimeGrid::new(1.0, 4).unwrap(), 10, 8).unwrap();
        let prob = BsdeProblem::new(DriverKind::Quadratic, vec![1.0; 10], &model, &ens).unwrap();
        assert!(solve(&prob, &BsdeOptions::default()).is_err());
        assert!(BsdeProblem::new(DriverKind::Quadratic, vec![0.0; 10], &model, &ens).is_err());
        assert!(BsdeProblem::new(DriverKind::Quadratic, vec![1.0; 9], &model, &ens).is_err());
    }

    fn constant_power(steps: usize, paths: usize, seed: u64, mu: f64) -> BsdeSolution {
        let model = MarketModel::black_scholes(mu, 0.2, 1.0).unwrap();
        let ens = simulate_paths(&model, TimeGrid::new(1.0, steps).unwrap(), paths, seed).unwrap();
        let prob = BsdeProblem::for_utility(&UtilitySpec::power(0.5).unwrap(), &model, &ens).unwrap();
        solve(&prob, &BsdeOptions::default()).unwrap()
    }

    #[test]
    fn constant_theta_power_matches_ode() {
        let sol = constant_power(50, 10_000, 21, 0.1);
        let exact = 0.125f64.exp();
        assert!((sol.v0().mean / exact - 1.0).abs() < 0.01, "{}", sol.v0().mean);
        for c in &sol.value_curve {
            let ode = (0.125 * (1.0 - c.t)).exp();
            assert!((c.mean / ode - 1.0).abs() < 0.01);
        }
        assert_eq!(sol.value_curve.last().unwrap().mean, 1.0);
        assert!(integrand_rms(&sol) <= 1e-2, "{}", integrand_rms(&sol));
        assert_eq!(sol.diagnostics.floor_activations, 0);
    }

    #[test]
    fn larger_risk_premium_raises_power_value() {
        // q < 0 makes the forward drift negative, so the backward solution grows
        let low = constant_power(20, 2000, 5, 0.06).v0().mean;
        let high = constant_power(20, 2000, 5, 0.1).v0().mean;
        assert!(high > low);
    }
}
