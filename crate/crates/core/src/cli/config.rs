//! Experiment configuration, read from a TOML file.
//!
//! ```toml
//! [model]
//! family = "black_scholes"   # or "local_volatility", "ou_factor"
//! mu = 0.1
//! sigma = 0.2
//! s0 = 1.0
//!
//! [utility]
//! family = "power"           # or "log", "exponential", "quadratic"
//! p = 0.5
//!
//! [grid]
//! horizon = 1.0
//! n_steps = 50
//! n_paths = 10000
//! seed = 7                   # required
//! ```
//!
//! The `solver`, `verify` and `output` sections are optional; see the README
//! for every key and its default.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::market::{BlackScholes, LocalVolatility, MarketModel, OuFactor, TimeGrid};
use crate::utility::{Claim, UtilitySpec};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub utility: UtilityConfig,
    pub grid: GridConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    BlackScholes {
        mu: f64,
        sigma: f64,
        s0: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        ellipticity_floor: Option<f64>,
    },
    LocalVolatility {
        mu: f64,
        sigma0: f64,
        beta: f64,
        s0: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        ellipticity_floor: Option<f64>,
    },
    OuFactor {
        sigma: f64,
        theta0: f64,
        theta1: f64,
        kappa: f64,
        mean: f64,
        factor_vol: f64,
        #[serde(default)]
        loading: f64,
        s0: f64,
        r0: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        ellipticity_floor: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum UtilityConfig {
    Power {
        p: f64,
    },
    Log,
    Exponential {
        gamma: f64,
        #[serde(default)]
        claim: ClaimConfig,
    },
    Quadratic {
        b: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClaimConfig {
    #[default]
    Zero,
    Constant {
        value: f64,
    },
    FactorTanh {
        amplitude: f64,
        slope: f64,
        centre: f64,
    },
    CappedCall {
        strike: f64,
        cap: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub horizon: f64,
    pub n_steps: usize,
    pub n_paths: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub basis_degree: usize,
    pub picard_iters: usize,
    pub pde_n_space: usize,
    pub pde_n_time: usize,
    /// Coarsest resolution of the convergence table; both double per level.
    pub convergence_n_space: usize,
    pub convergence_n_time: usize,
    pub convergence_levels: usize,
    /// Feynman-Kac paths for the PDE cross-check; 0 disables it.
    pub fk_paths: usize,
    pub fk_probes: usize,
    pub claim_bound: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            basis_degree: 3,
            picard_iters: 3,
            pde_n_space: 201,
            pde_n_time: 200,
            convergence_n_space: 33,
            convergence_n_time: 16,
            convergence_levels: 3,
            fk_paths: 0,
            fk_probes: 9,
            claim_bound: 1e3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub x0: f64,
    pub test_times: Vec<f64>,
    /// Multiples of the optimal holdings tested for the supermartingale
    /// verdict.
    pub perturbations: Vec<f64>,
    pub proportion_lo: f64,
    pub proportion_hi: f64,
    pub proportion_step: f64,
    pub rebalance_dates: Vec<f64>,
    pub allowance: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            x0: 1.0,
            test_times: vec![0.25, 0.5, 0.75],
            perturbations: vec![0.5, 0.75, 1.25, 1.5, 0.0],
            proportion_lo: 0.0,
            proportion_hi: 5.0,
            proportion_step: 0.25,
            rebalance_dates: vec![0.0],
            allowance: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
    Txt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: String,
    pub formats: Vec<Format>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: "out".into(),
            formats: vec![Format::Csv, Format::Json, Format::Txt],
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LabError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Field-level range checks.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut need = |ok: bool, msg: &str| {
            if !ok {
                out.push(msg.to_string());
            }
        };
        let finite_pos = |v: f64| v.is_finite() && v > 0.0;
        match &self.model {
            ModelConfig::BlackScholes { mu, sigma, s0, .. } => {
                need(mu.is_finite(), "model.mu must be finite");
                need(sigma.is_finite() && *sigma >= 0.0, "model.sigma must be finite and non-negative");
                need(finite_pos(*s0), "model.s0 must be positive");
            }
            ModelConfig::LocalVolatility { mu, sigma0, beta, s0, .. } => {
                need(mu.is_finite(), "model.mu must be finite");
                need(finite_pos(*sigma0), "model.sigma0 must be positive");
                need(beta.is_finite(), "model.beta must be finite");
                need(finite_pos(*s0), "model.s0 must be positive");
            }
            ModelConfig::OuFactor { sigma, theta0, theta1, kappa, mean, factor_vol, loading, s0, r0, .. } => {
                need(finite_pos(*sigma), "model.sigma must be positive");
                need(theta0.is_finite() && theta1.is_finite(), "model.theta0 and model.theta1 must be finite");
                need(kappa.is_finite() && *kappa >= 0.0, "model.kappa must be non-negative");
                need(mean.is_finite(), "model.mean must be finite");
                need(factor_vol.is_finite() && *factor_vol >= 0.0, "model.factor_vol must be non-negative");
                need(loading.is_finite(), "model.loading must be finite");
                need(finite_pos(*s0), "model.s0 must be positive");
                need(r0.is_finite(), "model.r0 must be finite");
            }
        }
        match &self.utility {
            UtilityConfig::Power { p } => need(*p > 0.0 && *p < 1.0, "utility.p must lie in (0, 1)"),
            UtilityConfig::Log => {}
            UtilityConfig::Exponential { gamma, .. } => need(finite_pos(*gamma), "utility.gamma must be positive"),
            UtilityConfig::Quadratic { b } => need(finite_pos(*b), "utility.b must be positive"),
        }
        need(finite_pos(self.grid.horizon), "grid.horizon must be positive");
        need(self.grid.n_steps >= 1, "grid.n_steps must be at least 1");
        need(self.grid.n_paths >= 2, "grid.n_paths must be at least 2");
        let s = &self.solver;
        need(s.basis_degree <= 6, "solver.basis_degree must be at most 6");
        need(s.picard_iters >= 1, "solver.picard_iters must be at least 1");
        need(s.pde_n_space >= 16 && s.pde_n_time >= 16, "solver.pde_n_space and solver.pde_n_time must be at least 16");
        need(
            s.convergence_n_space >= 16 && s.convergence_n_time >= 16,
            "solver.convergence_n_space and solver.convergence_n_time must be at least 16",
        );
        need(s.convergence_levels <= 6, "solver.convergence_levels must be at most 6");
        need(s.fk_paths == 0 || s.fk_paths >= 2, "solver.fk_paths must be 0 or at least 2");
        need(s.fk_probes >= 1, "solver.fk_probes must be at least 1");
        need(finite_pos(s.claim_bound), "solver.claim_bound must be positive");
        let v = &self.verify;
        need(finite_pos(v.x0) || !self.positive_domain() && v.x0.is_finite(), "verify.x0 must be positive for power and log utility");
        need(
            v.test_times.iter().all(|t| *t >= 0.0 && *t <= self.grid.horizon),
            "verify.test_times must lie in [0, grid.horizon]",
        );
        need(v.perturbations.iter().all(|p| p.is_finite()), "verify.perturbations must be finite");
        need(finite_pos(v.proportion_step), "verify.proportion_step must be positive");
        need(v.proportion_hi >= v.proportion_lo, "verify.proportion_hi must be at least verify.proportion_lo");
        need(
            !v.rebalance_dates.is_empty() && v.rebalance_dates.len() <= 4 && v.rebalance_dates[0] == 0.0,
            "verify.rebalance_dates must start at 0 and hold at most 4 dates",
        );
        need(v.allowance.is_finite() && v.allowance >= 0.0, "verify.allowance must be non-negative");
        need(!self.output.dir.is_empty(), "output.dir must not be empty");
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(LabError::Config(problems.join("; ")))
        }
    }

    fn positive_domain(&self) -> bool {
        matches!(self.utility, UtilityConfig::Power { .. } | UtilityConfig::Log)
    }

    pub fn market(&self) -> Result<MarketModel> {
        let (model, floor) = match &self.model {
            ModelConfig::BlackScholes { mu, sigma, s0, ellipticity_floor } => {
                (MarketModel::new(Arc::new(BlackScholes::new(*mu, *sigma)), vec![*s0], vec![])?, *ellipticity_floor)
            }
            ModelConfig::LocalVolatility { mu, sigma0, beta, s0, ellipticity_floor } => (
                MarketModel::new(
                    Arc::new(LocalVolatility {
                        mu: *mu,
                        sigma0: *sigma0,
                        beta: *beta,
                    }),
                    vec![*s0],
                    vec![],
                )?,
                *ellipticity_floor,
            ),
            ModelConfig::OuFactor {
                sigma,
                theta0,
                theta1,
                kappa,
                mean,
                factor_vol,
                loading,
                s0,
                r0,
                ellipticity_floor,
            } => (
                MarketModel::new(
                    Arc::new(OuFactor {
                        sigma: *sigma,
                        theta0: *theta0,
                        theta1: *theta1,
                        kappa: *kappa,
                        mean: *mean,
                        factor_vol: *factor_vol,
                        loading: *loading,
                    }),
                    vec![*s0],
                    vec![*r0],
                )?,
                *ellipticity_floor,
            ),
        };
        Ok(match floor {
            Some(f) => model.with_ellipticity_floor(f),
            None => model,
        })
    }

    pub fn utility_spec(&self) -> Result<UtilitySpec> {
        match &self.utility {
            UtilityConfig::Power { p } => UtilitySpec::power(*p),
            UtilityConfig::Log => Ok(UtilitySpec::Log),
            UtilityConfig::Exponential { gamma, claim } => {
                let claim = match claim {
                    ClaimConfig::Zero => Claim::Zero,
                    ClaimConfig::Constant { value } => Claim::Constant(*value),
                    ClaimConfig::FactorTanh { amplitude, slope, centre } => Claim::FactorTanh {
                        amplitude: *amplitude,
                        slope: *slope,
                        centre: *centre,
                    },
                    ClaimConfig::CappedCall { strike, cap } => Claim::CappedCall {
                        strike: *strike,
                        cap: *cap,
                    },
                };
                UtilitySpec::exponential(*gamma, claim)
            }
            UtilityConfig::Quadratic { b } => UtilitySpec::quadratic(*b),
        }
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.grid.horizon, self.grid.n_steps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[model]
family = "black_scholes"
mu = 0.1
sigma = 0.2
s0 = 1.0

[utility]
family = "log"

[grid]
horizon = 1.0
n_steps = 10
n_paths = 100
seed = 3
"#;

    #[test]
    fn parses_with_defaults_and_round_trips() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.solver, SolverConfig::default());
        assert_eq!(cfg.verify.test_times, vec![0.25, 0.5, 0.75]);
        let again = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, again);
        cfg.market().unwrap();
        cfg.utility_spec().unwrap();
    }

    #[test]
    fn missing_seed_names_the_field() {
        let text = MINIMAL.replace("seed = 3\n", "");
        let err = ExperimentConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("seed"), "{err}");
    }

    #[test]
    fn unknown_keys_and_bad_ranges_are_rejected() {
        let err = ExperimentConfig::from_toml(&MINIMAL.replace("mu = 0.1", "mu = 0.1\nnu = 2.0")).unwrap_err();
        assert!(err.to_string().contains("nu"), "{err}");
        let err = ExperimentConfig::from_toml(&MINIMAL.replace("family = \"log\"", "family = \"power\"\np = 1.5")).unwrap_err();
        assert!(err.to_string().contains("utility.p"), "{err}");
        let err = ExperimentConfig::from_toml(&MINIMAL.replace("n_paths = 100", "n_paths = 1")).unwrap_err();
        assert!(err.to_string().contains("grid.n_paths"), "{err}");
    }

    #[test]
    fn claims_and_factor_models() {
        let text = r#"
[model]
family = "ou_factor"
sigma = 0.2
theta0 = 0.0
theta1 = 1.0
kappa = 1.0
mean = 0.3
factor_vol = 0.3
s0 = 1.0
r0 = 0.3

[utility]
family = "exponential"
gamma = 1.0
claim = { kind = "factor_tanh", amplitude = 0.5, slope = 2.0, centre = 0.3 }

[grid]
horizon = 1.0
n_steps = 10
n_paths = 100
seed = 3
"#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        let m = cfg.market().unwrap();
        assert_eq!(m.factor_dim(), 1);
        assert!(matches!(cfg.utility_spec().unwrap(), UtilitySpec::Exponential { .. }));
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }
}
