use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;

use super::paths::{PathEnsemble, PathProcess};
use crate::error::{LabError, Result};

/// Holdings (shares per asset) as a function of `(t, x, s, r)`.
pub type FeedbackFn = dyn Fn(f64, f64, &[f64], &[f64]) -> Vec<f64> + Send + Sync;

#[derive(Clone)]
pub enum StrategyKind {
    Feedback(Arc<FeedbackFn>),
    /// Fraction of current wealth invested in each asset.
    ConstantProportion(Vec<f64>),
    /// Precomputed holdings, `n_paths x n_steps x d`.
    Pathwise { n_steps: usize, holdings: Arc<Vec<f64>> },
}

impl fmt::Debug for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StrategyKind::Feedback(_) => f.write_str("Feedback(..)"),
            StrategyKind::ConstantProportion(p) => write!(f, "ConstantProportion({p:?})"),
            StrategyKind::Pathwise { n_steps, .. } => write!(f, "Pathwise(n_steps={n_steps})"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct StrategyRule {
    pub kind: StrategyKind,
    /// Wealth floor `eps_X`; `None` disables clipping.
    pub floor: Option<f64>,
}

impl StrategyRule {
    pub fn feedback<F>(f: F) -> Self
    where
        F: Fn(f64, f64, &[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        Self {
            kind: StrategyKind::Feedback(Arc::new(f)),
            floor: None,
        }
    }

    pub fn constant_proportion(fractions: Vec<f64>) -> Self {
        Self {
            kind: StrategyKind::ConstantProportion(fractions),
            floor: None,
        }
    }

    pub fn zero(d: usize) -> Self {
        Self::constant_proportion(vec![0.0; d])
    }

    pub fn with_floor(mut self, floor: f64) -> Self {
        self.floor = Some(floor);
        self
    }

    /// Floor `1e-6 * x0`, used for utilities defined on the positive half-line.
    pub fn with_default_floor(self, x0: f64) -> Self {
        self.with_floor(1e-6 * x0)
    }

    pub fn holdings(&self, path: usize, k: usize, t: f64, x: f64, s: &[f64], r: &[f64]) -> Vec<f64> {
        match &self.kind {
            StrategyKind::Feedback(f) => f(t, x, s, r),
            StrategyKind::ConstantProportion(fr) => fr.iter().zip(s).map(|(f, si)| f * x / si).collect(),
            StrategyKind::Pathwise { n_steps, holdings } => {
                let d = s.len();
                let at = (path * n_steps + k) * d;
                holdings[at..at + d].to_vec()
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct WealthPaths {
    pub wealth: PathProcess,
    pub clip_count: usize,
}

/// Forward-Euler stochastic integral `X_{k+1} = X_k + h_k . (S_{k+1} - S_k)`.
pub fn integrate_wealth(ensemble: &PathEnsemble, rule: &StrategyRule, x0: f64) -> Result<WealthPaths> {
    let grid = *ensemble.grid();
    let steps = grid.n_steps();
    let d = ensemble.asset_dim();
    if let StrategyKind::Pathwise { n_steps, holdings } = &rule.kind {
        if *n_steps != steps || holdings.len() != ensemble.n_paths() * steps * d {
            return Err(LabError::Shape("pathwise holdings do not match the ensemble".into()));
        }
    }
    if let StrategyKind::ConstantProportion(fr) = &rule.kind {
        if fr.len() != d {
            return Err(LabError::Shape(format!("{} proportions for {d} assets", fr.len())));
        }
    }
    if let Some(floor) = rule.floor {
        if x0 < floor {
            return Err(LabError::Domain(format!("initial wealth {x0} below the floor {floor}")));
        }
    }

    let rows: Vec<Result<(Vec<f64>, usize)>> = (0..ensemble.n_paths())
        .into_par_iter()
        .map(|p| {
            let mut out = Vec::with_capacity(steps + 1);
            let mut x = x0;
            let mut clips = 0;
            out.push(x);
            for k in 0..steps {
                let s = ensemble.s(p, k);
                let s_next = ensemble.s(p, k + 1);
                let h = rule.holdings(p, k, grid.time(k), x, s, ensemble.r(p, k));
                if h.len() != d {
                    return Err(LabError::Shape(format!("rule returned {} holdings for {d} assets", h.len())));
                }
                if h.iter().any(|v| !v.is_finite()) {
                    return Err(LabError::NonFinite { path: p, step: k });
                }
                let gain: f64 = h.iter().zip(s.iter().zip(s_next)).map(|(hi, (a, b))| hi * (b - a)).sum();
                let mut next = x + gain;
                if let Some(floor) = rule.floor {
                    if next < floor {
                        // scale the position so the step lands on the floor
                        next = floor.min(x);
                        clips += 1;
                    }
                }
                x = next;
                out.push(x);
            }
            Ok((out, clips))
        })
        .collect();

    let mut values = Vec::with_capacity(ensemble.n_paths() * (steps + 1));
    let mut clip_count = 0;
    for row in rows {
        let (v, c) = row?;
        values.extend(v);
        clip_count += c;
    }
    Ok(WealthPaths {
        wealth: PathProcess::from_values(ensemble.n_paths(), steps + 1, values)?,
        clip_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{mean_stderr, simulate_paths, MarketModel, TimeGrid};
    use approx::assert_relative_eq;

    fn ensemble(n_paths: usize, steps: usize, seed: u64) -> PathEnsemble {
        let m = MarketModel::black_scholes(0.1, 0.2, 1.0).unwrap();
        simulate_paths(&m, TimeGrid::new(1.0, steps).unwrap(), n_paths, seed).unwrap()
    }

    #[test]
    fn zero_strategy_keeps_wealth() {
        let ens = ensemble(20, 10, 1);
        let w = integrate_wealth(&ens, &StrategyRule::zero(1), 3.0).unwrap();
        assert!(w.wealth.values().iter().all(|x| *x == 3.0));
        assert_eq!(w.clip_count, 0);
    }

    #[test]
    fn buy_and_hold_telescopes() {
        let ens = ensemble(20, 10, 2);
        let rule = StrategyRule::feedback(|_, _, _, _| vec![1.0]);
        let w = integrate_wealth(&ens, &rule, 2.0).unwrap();
        for p in 0..20 {
            for k in 0..=10 {
                assert_relative_eq!(w.wealth.get(p, k), 2.0 + ens.s(p, k)[0] - ens.s(p, 0)[0], epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn nan_holding_names_path_and_step() {
        let ens = ensemble(4, 10, 2);
        let rule = StrategyRule::feedback(|t, _, _, _| if t > 0.45 { vec![f64::NAN] } else { vec![0.0] });
        match integrate_wealth(&ens, &rule, 1.0) {
            Err(LabError::NonFinite { path: 0, step: 5 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn clipping_keeps_wealth_above_floor() {
        let ens = ensemble(500, 20, 9);
        let rule = StrategyRule::constant_proportion(vec![40.0]).with_floor(0.01);
        let w = integrate_wealth(&ens, &rule, 1.0).unwrap();
        assert!(w.clip_count > 0);
        assert!(w.wealth.values().iter().all(|x| *x >= 0.01));
    }

    #[test]
    fn log_optimal_growth_rate() {
        // E log X_T = (pi mu - pi^2 sigma^2 / 2) T = 0.125 at pi = mu / sigma^2 = 2.5
        let ens = ensemble(100_000, 100, 21);
        let w = integrate_wealth(&ens, &StrategyRule::constant_proportion(vec![2.5]), 1.0).unwrap();
        let logs: Vec<f64> = w.wealth.column(100).iter().map(|x| x.ln()).collect();
        let (m, se) = mean_stderr(&logs);
        assert!((m - 0.125).abs() <= 3.0 * se, "mean {m} se {se}");
        assert_eq!(w.clip_count, 0);
    }
}
