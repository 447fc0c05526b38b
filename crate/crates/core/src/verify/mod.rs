//! Statistical form of the optimality principle and independent oracles:
//! `V(t, X^pi_t)` is a supermartingale for every admissible rule and a
//! martingale for the optimal one.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{LabError, Result};
use crate::market::{check_shape, integrate_wealth, mean_stderr, MarketModel, PathEnsemble, StrategyKind, StrategyRule};
use crate::utility::UtilitySpec;
use crate::valuation::{strategy_from_value, ValueProcess};

/// z-score threshold of the martingale and supermartingale verdicts.
pub const Z_THRESHOLD: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    MartingaleOk,
    SupermartingaleOk,
    Violation { z: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeCheck {
    pub t: f64,
    pub mean: f64,
    pub stderr: f64,
    /// `(mean - V(0, x0)) / stderr`; infinite when the sample is constant
    /// and differs from `V(0, x0)`.
    pub z: f64,
    pub supermartingale_ok: bool,
    pub martingale_ok: bool,
    pub verdict: Verdict,
    /// Largest `|V(t, X_t)|` over paths, a boundedness proxy.
    pub max_abs_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimalityReport {
    pub v0: f64,
    pub checks: Vec<TimeCheck>,
    pub clip_count: usize,
}

impl OptimalityReport {
    pub fn supermartingale_ok(&self) -> bool {
        self.checks.iter().all(|c| c.supermartingale_ok)
    }

    pub fn martingale_ok(&self) -> bool {
        self.checks.iter().all(|c| c.martingale_ok)
    }
}

fn z_score(diff: f64, stderr: f64) -> f64 {
    if stderr > 0.0 {
        diff / stderr
    } else if diff == 0.0 {
        0.0
    } else {
        diff.signum() * f64::INFINITY
    }
}

/// Estimates `E[V(t, X^pi_t)]` at each test time and compares it with
/// `V(0, x0)`.
pub fn supermartingale_test(
    value: &ValueProcess,
    rule: &StrategyRule,
    ensemble: &PathEnsemble,
    x0: f64,
    test_times: &[f64],
) -> Result<OptimalityReport> {
    check_shape(ensemble, &value.model)?;
    let grid = *ensemble.grid();
    let wealth = integrate_wealth(ensemble, rule, x0)?;
    let v0 = value.value(0.0, x0, ensemble.s(0, 0), ensemble.r(0, 0))?;
    let mut checks = Vec::with_capacity(test_times.len());
    for &t in test_times {
        let k = grid.knot_index(t)?;
        let samples: Vec<f64> = (0..ensemble.n_paths())
            .into_par_iter()
            .map(|p| value.value(grid.time(k), wealth.wealth.get(p, k), ensemble.s(p, k), ensemble.r(p, k)))
            .collect::<Result<_>>()?;
        let (mean, stderr) = mean_stderr(&samples);
        let z = z_score(mean - v0, stderr);
        let supermartingale_ok = z <= Z_THRESHOLD;
        let martingale_ok = z.abs() <= Z_THRESHOLD;
        let verdict = if martingale_ok {
            Verdict::MartingaleOk
        } else if supermartingale_ok {
            Verdict::SupermartingaleOk
        } else {
            Verdict::Violation { z }
        };
        checks.push(TimeCheck {
            t,
            mean,
            stderr,
            z,
            supermartingale_ok,
            martingale_ok,
            verdict,
            max_abs_value: samples.iter().fold(0.0, |a, v| a.max(v.abs())),
        });
    }
    Ok(OptimalityReport {
        v0,
        checks,
        clip_count: wealth.clip_count,
    })
}

/// Rule whose holdings are `scale` times those of `base`.
pub fn scaled_rule(base: &StrategyRule, scale: f64) -> StrategyRule {
    let kind = match &base.kind {
        StrategyKind::Feedback(f) => {
            let f = f.clone();
            StrategyKind::Feedback(Arc::new(move |t, x, s, r| f(t, x, s, r).into_iter().map(|h| scale * h).collect()))
        }
        StrategyKind::ConstantProportion(p) => StrategyKind::ConstantProportion(p.iter().map(|v| scale * v).collect()),
        StrategyKind::Pathwise { n_steps, holdings } => StrategyKind::Pathwise {
            n_steps: *n_steps,
            holdings: Arc::new(holdings.iter().map(|h| scale * h).collect()),
        },
    };
    StrategyRule { kind, floor: base.floor }
}

/// Evenly spaced proportions `lo, lo + step, ..., hi`.
pub fn proportion_grid(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(hi >= lo) {
        return Err(LabError::Config(format!("bad proportion grid [{lo}, {hi}] step {step}")));
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| lo + step * i as f64).collect())
}

pub const DEFAULT_PROPORTION_STEP: f64 = 0.25;
pub const MAX_REBALANCE_DATES: usize = 4;
const MAX_CANDIDATES: usize = 200_000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Candidate {
    /// Proportions per period, asset-major within a period.
    pub proportions: Vec<f64>,
    pub mean: f64,
    pub stderr: f64,
    pub clip_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BruteForceResult {
    pub proportion_grid: Vec<f64>,
    pub rebalance_dates: Vec<f64>,
    pub candidates: Vec<Candidate>,
    pub argmax: usize,
    pub best_value: f64,
    pub best_stderr: f64,
    /// Whether some coordinate of the argmax sits on the edge of the grid.
    pub boundary: bool,
}

impl BruteForceResult {
    pub fn best(&self) -> &Candidate {
        &self.candidates[self.argmax]
    }
}

/// Expected terminal utility of every piecewise-constant-proportion rule on
/// the grid. Proportions are rebalanced at every time step and switch at the
/// rebalance dates; ties go to the lexicographically smallest candidate.
pub fn brute_force_value(
    model: &MarketModel,
    utility: &UtilitySpec,
    proportions: &[f64],
    rebalance_dates: &[f64],
    ensemble: &PathEnsemble,
    x0: f64,
) -> Result<BruteForceResult> {
    check_shape(ensemble, model)?;
    if proportions.is_empty() {
        return Err(LabError::Config("empty proportion grid".into()));
    }
    if rebalance_dates.is_empty() || rebalance_dates.len() > MAX_REBALANCE_DATES {
        return Err(LabError::Config(format!("between 1 and {MAX_REBALANCE_DATES} rebalance dates are supported")));
    }
    if rebalance_dates[0] != 0.0 || rebalance_dates.windows(2).any(|w| w[0] >= w[1]) {
        return Err(LabError::Config("rebalance dates must start at 0 and increase".into()));
    }
    if proportions.iter().any(|p| !p.is_finite()) {
        return Err(LabError::Config("proportions must be finite".into()));
    }
    let mut sorted = proportions.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let proportions = &sorted[..];
    let grid = *ensemble.grid();
    let starts: Vec<usize> = rebalance_dates.iter().map(|t| grid.knot_index(*t)).collect::<Result<_>>()?;
    let d = ensemble.asset_dim();
    let dims = d * starts.len();
    let total = proportions.len().checked_pow(dims as u32).filter(|n| *n <= MAX_CANDIDATES).ok_or_else(|| {
        LabError::Config(format!("{}^{dims} candidates exceed the limit {MAX_CANDIDATES}", proportions.len()))
    })?;
    let positive = utility.positive_domain();
    let floor = 1e-6 * x0;
    let steps = grid.n_steps();

    let candidates: Vec<Candidate> = (0..total)
        .into_par_iter()
        .map(|idx| {
            // lexicographic order: first coordinate varies slowest
            let mut digits = vec![0usize; dims];
            let mut rest = idx;
            for slot in digits.iter_mut().rev() {
                *slot = rest % proportions.len();
                rest /= proportions.len();
            }
            let props: Vec<f64> = digits.iter().map(|i| proportions[*i]).collect();
            let mut clip_count = 0usize;
            let utilities: Vec<f64> = (0..ensemble.n_paths())
                .map(|p| {
                    let mut x = x0;
                    let mut period = 0;
                    for k in 0..steps {
                        while period + 1 < starts.len() && k >= starts[period + 1] {
                            period += 1;
                        }
                        let (s, s1) = (ensemble.s(p, k), ensemble.s(p, k + 1));
                        let gain: f64 = (0..d).map(|i| props[period * d + i] * (s1[i] / s[i] - 1.0)).sum();
                        x *= 1.0 + gain;
                        if positive && x < floor {
                            x = floor;
                            clip_count += 1;
                        }
                    }
                    utility.terminal_utility(x, ensemble.s(p, steps), ensemble.r(p, steps))
                })
                .collect();
            let (mean, stderr) = mean_stderr(&utilities);
            Candidate {
                proportions: props,
                mean,
                stderr,
                clip_count,
            }
        })
        .collect();

    let mut argmax: Option<usize> = None;
    for (i, c) in candidates.iter().enumerate() {
        if c.mean.is_finite() && argmax.is_none_or(|a| c.mean > candidates[a].mean) {
            argmax = Some(i);
        }
    }
    let argmax = argmax.ok_or_else(|| LabError::Domain("every candidate has infinite negative utility".into()))?;
    let (lo, hi) = (proportions[0], proportions[proportions.len() - 1]);
    let best = &candidates[argmax];
    let boundary = proportions.len() > 1 && best.proportions.iter().any(|p| *p == lo || *p == hi);
    Ok(BruteForceResult {
        proportion_grid: proportions.to_vec(),
        rebalance_dates: rebalance_dates.to_vec(),
        best_value: best.mean,
        best_stderr: best.stderr,
        argmax,
        boundary,
        candidates,
    })
}

pub const DEFAULT_DISCRETIZATION_ALLOWANCE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossCheckReport {
    pub v0: f64,
    pub mean: f64,
    pub stderr: f64,
    pub tolerance: f64,
    pub clip_count: usize,
    pub pass: bool,
    pub reason: Option<String>,
}

/// Integrates the feedback rule read off `value` and compares the expected
/// terminal utility with `V(0, x0)`.
pub fn forward_sde_crosscheck(
    value: Arc<ValueProcess>,
    ensemble: &PathEnsemble,
    x0: f64,
    allowance: f64,
) -> Result<CrossCheckReport> {
    check_shape(ensemble, &value.model)?;
    let positive = value.utility.positive_domain();
    let mut rule = strategy_from_value(value.clone());
    if positive {
        rule = rule.with_default_floor(x0);
    }
    let wealth = integrate_wealth(ensemble, &rule, x0)?;
    let steps = ensemble.grid().n_steps();
    let samples: Vec<f64> = (0..ensemble.n_paths())
        .map(|p| value.utility.terminal_utility(wealth.wealth.get(p, steps), ensemble.s(p, steps), ensemble.r(p, steps)))
        .collect();
    let (mean, stderr) = mean_stderr(&samples);
    let v0 = value.value(0.0, x0, ensemble.s(0, 0), ensemble.r(0, 0))?;
    let tolerance = Z_THRESHOLD * stderr + allowance * v0.abs();
    let mut reason = None;
    if positive && wealth.clip_count > 0 {
        reason = Some(format!("optimal wealth hit the floor {} times", wealth.clip_count));
    } else if !((mean - v0).abs() <= tolerance) {
        reason = Some(format!("|{mean:.6} - {v0:.6}| exceeds {tolerance:.3e}"));
    }
    Ok(CrossCheckReport {
        v0,
        mean,
        stderr,
        tolerance,
        clip_count: wealth.clip_count,
        pass: reason.is_none(),
        reason,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriverArgmaxReport {
    pub analytic_maximizer: f64,
    pub analytic_max: f64,
    /// `|V_x lambda + phi_x|^2 nu / (-2 V_xx)`.
    pub formula_max: f64,
    pub grid_maximizer: f64,
    pub grid_max: f64,
    pub grid_step: f64,
    pub within_one_step: bool,
    pub beats_grid: bool,
    pub formula_relative_error: f64,
}

/// `G(p) = p nu (V_x lambda + phi_x) + V_xx p^2 nu / 2`.
pub fn driver_g(p: f64, v_x: f64, v_xx: f64, phi_x: f64, lambda: f64, nu: f64) -> f64 {
    v_x * p * nu * lambda + p * nu * phi_x + 0.5 * v_xx * p * p * nu
}

/// Grid-maximizes `G` and compares with the maximizer
/// `-(V_x lambda + phi_x) / V_xx`.
pub fn driver_argmax_check(v_x: f64, v_xx: f64, phi_x: f64, lambda: f64, nu: f64, candidates: &[f64]) -> Result<DriverArgmaxReport> {
    if !(v_xx < 0.0) {
        return Err(LabError::Concavity(format!("V_xx = {v_xx} is not negative")));
    }
    if !(nu > 0.0) {
        return Err(LabError::Domain(format!("nu must be positive, got {nu}")));
    }
    if candidates.len() < 2 {
        return Err(LabError::Config("need at least two candidates".into()));
    }
    let g = |p: f64| driver_g(p, v_x, v_xx, phi_x, lambda, nu);
    let analytic_maximizer = -(v_x * lambda + phi_x) / v_xx;
    let analytic_max = g(analytic_maximizer);
    let formula_max = (v_x * lambda + phi_x).powi(2) * nu / (-2.0 * v_xx);
    let (mut grid_maximizer, mut grid_max) = (candidates[0], g(candidates[0]));
    for &p in &candidates[1..] {
        let v = g(p);
        if v > grid_max {
            grid_max = v;
            grid_maximizer = p;
        }
    }
    let grid_step = candidates.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
    let scale = analytic_max.abs().max(grid_max.abs()).max(f64::MIN_POSITIVE);
    let formula_relative_error = if formula_max == 0.0 {
        analytic_max.abs()
    } else {
        ((analytic_max - formula_max) / formula_max).abs()
    };
    Ok(DriverArgmaxReport {
        analytic_maximizer,
        analytic_max,
        formula_max,
        grid_maximizer,
        grid_max,
        grid_step,
        within_one_step: (grid_maximizer - analytic_maximizer).abs() <= grid_step * (1.0 + 1e-9),
        beats_grid: analytic_max >= grid_max - 1e-12 * scale,
        formula_relative_error,
    })
}
