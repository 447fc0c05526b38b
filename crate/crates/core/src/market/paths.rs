use rayon::prelude::*;
use serde::Serialize;

use super::model::MarketModel;
use crate::error::{LabError, Result};
use crate::rng::{fill_normals, path_stream};

/// Uniform time grid `0 = t_0 < ... < t_N = T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(LabError::Config(format!("horizon must be positive, got {horizon}")));
        }
        if n_steps == 0 {
            return Err(LabError::Config("n_steps must be at least 1".into()));
        }
        Ok(Self { horizon, n_steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    pub fn knots(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| self.time(k)).collect()
    }

    /// Index of the knot equal to `t` up to a hundredth of a step.
    pub fn knot_index(&self, t: f64) -> Result<usize> {
        let x = t / self.dt();
        let k = x.round();
        if k < 0.0 || k > self.n_steps as f64 || (x - k).abs() > 1e-2 {
            return Err(LabError::Extrapolation(format!(
                "time {t} is not a knot of the grid (T={}, N={})",
                self.horizon, self.n_steps
            )));
        }
        Ok(k as usize)
    }
}

/// Per-path scalar process sampled on the knots, stored path-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PathProcess {
    n_paths: usize,
    n_knots: usize,
    values: Vec<f64>,
}

impl PathProcess {
    pub fn from_values(n_paths: usize, n_knots: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_paths * n_knots {
            return Err(LabError::Shape(format!(
                "expected {} values, got {}",
                n_paths * n_knots,
                values.len()
            )));
        }
        Ok(Self {
            n_paths,
            n_knots,
            values,
        })
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_knots(&self) -> usize {
        self.n_knots
    }

    pub fn get(&self, path: usize, k: usize) -> f64 {
        self.values[path * self.n_knots + k]
    }

    pub fn path(&self, path: usize) -> &[f64] {
        &self.values[path * self.n_knots..(path + 1) * self.n_knots]
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        (0..self.n_paths).map(|p| self.get(p, k)).collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mean_stderr(&self, k: usize) -> (f64, f64) {
        mean_stderr(&self.column(k))
    }

    pub fn min(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

/// Sample mean and standard error of the mean.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Simulated asset/factor paths with the Brownian increments that drove them.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    grid: TimeGrid,
    n_paths: usize,
    seed: u64,
    asset_dim: usize,
    factor_dim: usize,
    s: Vec<f64>,
    r: Vec<f64>,
    dw: Vec<f64>,
    warnings: Vec<String>,
}

impl PathEnsemble {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn asset_dim(&self) -> usize {
        self.asset_dim
    }

    pub fn factor_dim(&self) -> usize {
        self.factor_dim
    }

    pub fn brownian_dim(&self) -> usize {
        self.asset_dim + self.factor_dim
    }

    pub fn n_knots(&self) -> usize {
        self.grid.n_steps() + 1
    }

    pub fn s(&self, path: usize, k: usize) -> &[f64] {
        let d = self.asset_dim;
        let at = (path * self.n_knots() + k) * d;
        &self.s[at..at + d]
    }

    pub fn r(&self, path: usize, k: usize) -> &[f64] {
        let m = self.factor_dim;
        let at = (path * self.n_knots() + k) * m;
        &self.r[at..at + m]
    }

    /// Brownian increment over `[t_k, t_{k+1}]`.
    pub fn dw(&self, path: usize, k: usize) -> &[f64] {
        let n = self.brownian_dim();
        let at = (path * self.grid.n_steps() + k) * n;
        &self.dw[at..at + n]
    }

    /// Diagnostics recorded during simulation (ellipticity, boundedness).
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Markov state `(log S, R)` at knot `k` of `path`.
    pub fn state_features(&self, path: usize, k: usize, out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.s(path, k).iter().map(|s| s.ln()));
        out.extend_from_slice(self.r(path, k));
    }
}

/// Log-Euler for the assets, Euler for the factors, one ChaCha stream per path.
pub fn simulate_paths(
    model: &MarketModel,
    grid: TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    if n_paths == 0 {
        return Err(LabError::Config("n_paths must be at least 1".into()));
    }
    let d = model.asset_dim();
    let m = model.factor_dim();
    let n = d + m;
    let steps = grid.n_steps();
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let coeffs = model.coefficients();

    let per_path: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = path_stream(seed, p);
            let mut s_path = Vec::with_capacity((steps + 1) * d);
            let mut r_path = Vec::with_capacity((steps + 1) * m);
            let mut dw_path = vec![0.0; steps * n];
            let mut s = model.s0().to_vec();
            let mut r = model.r0().to_vec();
            s_path.extend_from_slice(&s);
            r_path.extend_from_slice(&r);
            for k in 0..steps {
                let t = grid.time(k);
                let dw = &mut dw_path[k * n..(k + 1) * n];
                fill_normals(&mut rng, dw);
                dw.iter_mut().for_each(|z| *z *= sqrt_dt);

                let mu = coeffs.drift(t, &s, &r);
                let sig = coeffs.asset_vol(t, &s, &r);
                let mut r_next = r.clone();
                if m > 0 {
                    let b = coeffs.factor_drift(t, &s, &r);
                    let delta = coeffs.factor_loading(t, &s, &r);
                    let perp = coeffs.factor_vol(t, &s, &r);
                    for j in 0..m {
                        let mut inc = b[j] * dt;
                        for i in 0..d {
                            inc += delta[(j, i)] * dw[i];
                        }
                        for i in 0..m {
                            inc += perp[(j, i)] * dw[d + i];
                        }
                        r_next[j] += inc;
                    }
                }
                for i in 0..d {
                    let mut var = 0.0;
                    let mut noise = 0.0;
                    for j in 0..d {
                        var += sig[(i, j)] * sig[(i, j)];
                        noise += sig[(i, j)] * dw[j];
                    }
                    s[i] *= ((mu[i] - 0.5 * var) * dt + noise).exp();
                }
                r = r_next;
                s_path.extend_from_slice(&s);
                r_path.extend_from_slice(&r);
            }
            (s_path, r_path, dw_path)
        })
        .collect();

    let mut s_all = Vec::with_capacity(n_paths * (steps + 1) * d);
    let mut r_all = Vec::with_capacity(n_paths * (steps + 1) * m);
    let mut dw_all = Vec::with_capacity(n_paths * steps * n);
    for (s, r, dw) in per_path {
        s_all.extend(s);
        r_all.extend(r);
        dw_all.extend(dw);
    }
    if let Some(bad) = s_all.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(LabError::ModelValidation(format!(
            "simulated asset price left (0, inf): {bad}; coefficients are not bounded on the visited states"
        )));
    }

    Ok(PathEnsemble {
        grid,
        n_paths,
        seed,
        asset_dim: d,
        factor_dim: m,
        s: s_all,
        r: r_all,
        dw: dw_all,
        warnings: model.check_conditions(grid.horizon()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn zero_dynamics_keep_every_path_at_s0() {
        let model = MarketModel::black_scholes(0.0, 0.0, 1.7)
            .unwrap()
            .without_ellipticity_check();
        let ens = simulate_paths(&model, TimeGrid::new(1.0, 20).unwrap(), 50, 1).unwrap();
        assert!(ens.warnings().is_empty());
        for p in 0..50 {
            for k in 0..=20 {
                assert_eq!(ens.s(p, k), &[1.7]);
            }
        }
    }

    #[test]
    fn deterministic_rate_is_exact() {
        let model = MarketModel::black_scholes(0.1, 0.0, 1.0).unwrap();
        let ens = simulate_paths(&model, TimeGrid::new(1.0, 50).unwrap(), 10, 3).unwrap();
        assert!(!ens.warnings().is_empty());
        for p in 0..10 {
            assert_relative_eq!(ens.s(p, 50)[0], 0.1f64.exp(), max_relative = 1e-13);
        }
    }

    #[test]
    fn driftless_paths_are_martingales() {
        let model = MarketModel::black_scholes(0.0, 0.2, 1.0).unwrap();
        let ens = simulate_paths(&model, TimeGrid::new(1.0, 10).unwrap(), 100_000, 11).unwrap();
        let terminal: Vec<f64> = (0..ens.n_paths()).map(|p| ens.s(p, 10)[0]).collect();
        let (mean, se) = mean_stderr(&terminal);
        assert!((mean - 1.0).abs() <= 3.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn increments_have_unit_covariance_rate() {
        let ou = crate::market::OuFactor {
            sigma: 0.2,
            theta0: 0.0,
            theta1: 1.0,
            kappa: 1.0,
            mean: 0.3,
            factor_vol: 0.3,
            loading: 0.0,
        };
        let model =
            MarketModel::new(std::sync::Arc::new(ou), vec![1.0], vec![0.3]).unwrap();
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let n_paths = 50_000;
        let ens = simulate_paths(&model, grid, n_paths, 5).unwrap();
        let dt = grid.dt();
        for k in 0..4 {
            for i in 0..2 {
                let xs: Vec<f64> = (0..n_paths).map(|p| ens.dw(p, k)[i]).collect();
                let (m, se) = mean_stderr(&xs);
                assert!(m.abs() <= 3.0 * se);
                let sq: Vec<f64> = xs.iter().map(|x| x * x).collect();
                let (v, se_v) = mean_stderr(&sq);
                assert!((v - dt).abs() <= 3.0 * se_v, "var {v} vs {dt}");
            }
            let cross: Vec<f64> = (0..n_paths).map(|p| ens.dw(p, k)[0] * ens.dw(p, k)[1]).collect();
            let (c, se_c) = mean_stderr(&cross);
            assert!(c.abs() <= 3.0 * se_c);
        }
    }

    #[test]
    fn knot_lookup() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        assert_eq!(g.knot_index(0.5).unwrap(), 2);
        assert_eq!(g.time(4), 1.0);
        assert!(g.knot_index(0.3).is_err());
        assert!(g.knot_index(1.5).is_err());
    }
}
