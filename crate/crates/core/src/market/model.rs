use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{LabError, Result};

/// Coefficient functions of the asset/factor diffusion
///
/// ```text
/// dS = diag(S) (mu dt + sigma_l dW^l)
/// dR = b dt + delta dW^l + sigma_perp dW^perp
/// ```
///
/// with `d` assets driven by `W^l` and `k = n - d` factors. Custom models
/// implement this trait; the built-in families below cover the configurable
/// cases.
pub trait Coefficients: Send + Sync + fmt::Debug {
    fn asset_dim(&self) -> usize;

    fn factor_dim(&self) -> usize {
        0
    }

    fn drift(&self, t: f64, s: &[f64], r: &[f64]) -> DVector<f64>;

    fn asset_vol(&self, t: f64, s: &[f64], r: &[f64]) -> DMatrix<f64>;

    fn factor_drift(&self, _t: f64, _s: &[f64], _r: &[f64]) -> DVector<f64> {
        DVector::zeros(self.factor_dim())
    }

    /// `(n-d) x d` loading of the factors on the asset Brownian motions.
    fn factor_loading(&self, _t: f64, _s: &[f64], _r: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(self.factor_dim(), self.asset_dim())
    }

    fn factor_vol(&self, _t: f64, _s: &[f64], _r: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(self.factor_dim(), self.factor_dim())
    }

    fn label(&self) -> String;
}

/// Constant drift and volatility.
#[derive(Debug, Clone)]
pub struct BlackScholes {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

impl BlackScholes {
    pub fn new(mu: f64, sigma: f64) -> Self {
        Self {
            mu: DVector::from_element(1, mu),
            sigma: DMatrix::from_element(1, 1, sigma),
        }
    }

    pub fn multi(mu: Vec<f64>, sigma: DMatrix<f64>) -> Self {
        Self {
            mu: DVector::from_vec(mu),
            sigma,
        }
    }
}

impl Coefficients for BlackScholes {
    fn asset_dim(&self) -> usize {
        self.mu.len()
    }

    fn drift(&self, _t: f64, _s: &[f64], _r: &[f64]) -> DVector<f64> {
        self.mu.clone()
    }

    fn asset_vol(&self, _t: f64, _s: &[f64], _r: &[f64]) -> DMatrix<f64> {
        self.sigma.clone()
    }

    fn label(&self) -> String {
        "black_scholes".into()
    }
}

/// One asset with constant drift and local volatility `sigma0 * s^beta`.
#[derive(Debug, Clone)]
pub struct LocalVolatility {
    pub mu: f64,
    pub sigma0: f64,
    pub beta: f64,
}

impl Coefficients for LocalVolatility {
    fn asset_dim(&self) -> usize {
        1
    }

    fn drift(&self, _t: f64, _s: &[f64], _r: &[f64]) -> DVector<f64> {
        DVector::from_element(1, self.mu)
    }

    fn asset_vol(&self, _t: f64, s: &[f64], _r: &[f64]) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.sigma0 * s[0].powf(self.beta))
    }

    fn label(&self) -> String {
        "local_volatility".into()
    }
}

/// One asset whose market price of risk is affine in an Ornstein-Uhlenbeck
/// factor: `theta(r) = theta0 + theta1 r`, `mu = sigma theta(r)`,
/// `dR = kappa (mean - R) dt + loading dW^1 + factor_vol dW^2`.
#[derive(Debug, Clone)]
pub struct OuFactor {
    pub sigma: f64,
    pub theta0: f64,
    pub theta1: f64,
    pub kappa: f64,
    pub mean: f64,
    pub factor_vol: f64,
    pub loading: f64,
}

impl OuFactor {
    pub fn theta(&self, r: f64) -> f64 {
        self.theta0 + self.theta1 * r
    }
}

impl Coefficients for OuFactor {
    fn asset_dim(&self) -> usize {
        1
    }

    fn factor_dim(&self) -> usize {
        1
    }

    fn drift(&self, _t: f64, _s: &[f64], r: &[f64]) -> DVector<f64> {
        DVector::from_element(1, self.sigma * self.theta(r[0]))
    }

    fn asset_vol(&self, _t: f64, _s: &[f64], _r: &[f64]) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.sigma)
    }

    fn factor_drift(&self, _t: f64, _s: &[f64], r: &[f64]) -> DVector<f64> {
        DVector::from_element(1, self.kappa * (self.mean - r[0]))
    }

    fn factor_loading(&self, _t: f64, _s: &[f64], _r: &[f64]) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.loading)
    }

    fn factor_vol(&self, _t: f64, _s: &[f64], _r: &[f64]) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.factor_vol)
    }

    fn label(&self) -> String {
        "ou_factor".into()
    }
}

/// Box of states on which boundedness and ellipticity are probed.
#[derive(Debug, Clone, PartialEq)]
pub struct StateBox {
    pub s_lo: Vec<f64>,
    pub s_hi: Vec<f64>,
    pub r_lo: Vec<f64>,
    pub r_hi: Vec<f64>,
}

impl StateBox {
    pub fn around(s0: &[f64], r0: &[f64]) -> Self {
        Self {
            s_lo: s0.iter().map(|s| 0.25 * s).collect(),
            s_hi: s0.iter().map(|s| 4.0 * s).collect(),
            r_lo: r0.iter().map(|r| r - 1.0).collect(),
            r_hi: r0.iter().map(|r| r + 1.0).collect(),
        }
    }

    /// 10 x 10 lattice over the first asset and first factor axis; remaining
    /// coordinates sit at the box centre.
    pub fn lattice(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        const POINTS: usize = 10;
        let centre = |lo: &[f64], hi: &[f64]| -> Vec<f64> {
            lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)).collect()
        };
        let axis = |lo: f64, hi: f64, i: usize| lo + (hi - lo) * i as f64 / (POINTS - 1) as f64;
        let r_points = if self.r_lo.is_empty() { 1 } else { POINTS };
        let mut out = Vec::with_capacity(POINTS * r_points);
        for i in 0..POINTS {
            for j in 0..r_points {
                let mut s = centre(&self.s_lo, &self.s_hi);
                let mut r = centre(&self.r_lo, &self.r_hi);
                if !s.is_empty() {
                    s[0] = axis(self.s_lo[0], self.s_hi[0], i);
                }
                if !r.is_empty() {
                    r[0] = axis(self.r_lo[0], self.r_hi[0], j);
                }
                out.push((s, r));
            }
        }
        out
    }
}

/// A diffusion market: coefficients plus initial state.
#[derive(Debug, Clone)]
pub struct MarketModel {
    coeffs: Arc<dyn Coefficients>,
    s0: Vec<f64>,
    r0: Vec<f64>,
    state_box: StateBox,
    ellipticity_floor: Option<f64>,
}

pub const DEFAULT_ELLIPTICITY_FLOOR: f64 = 1e-4;

impl MarketModel {
    pub fn new(coeffs: Arc<dyn Coefficients>, s0: Vec<f64>, r0: Vec<f64>) -> Result<Self> {
        if s0.len() != coeffs.asset_dim() {
            return Err(LabError::ModelValidation(format!(
                "s0 has {} components, model has {} assets",
                s0.len(),
                coeffs.asset_dim()
            )));
        }
        if r0.len() != coeffs.factor_dim() {
            return Err(LabError::ModelValidation(format!(
                "r0 has {} components, model has {} factors",
                r0.len(),
                coeffs.factor_dim()
            )));
        }
        if let Some(bad) = s0.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(LabError::ModelValidation(format!(
                "initial asset price must be positive, got {bad}"
            )));
        }
        if r0.iter().any(|r| !r.is_finite()) {
            return Err(LabError::ModelValidation("initial factor value is not finite".into()));
        }
        let state_box = StateBox::around(&s0, &r0);
        Ok(Self {
            coeffs,
            s0,
            r0,
            state_box,
            ellipticity_floor: Some(DEFAULT_ELLIPTICITY_FLOOR),
        })
    }

    pub fn black_scholes(mu: f64, sigma: f64, s0: f64) -> Result<Self> {
        Self::new(Arc::new(BlackScholes::new(mu, sigma)), vec![s0], vec![])
    }

    pub fn with_state_box(mut self, state_box: StateBox) -> Self {
        self.state_box = state_box;
        self
    }

    pub fn with_ellipticity_floor(mut self, floor: f64) -> Self {
        self.ellipticity_floor = Some(floor);
        self
    }

    /// Degenerate test mode (e.g. zero volatility).
    pub fn without_ellipticity_check(mut self) -> Self {
        self.ellipticity_floor = None;
        self
    }

    pub fn coefficients(&self) -> &dyn Coefficients {
        self.coeffs.as_ref()
    }

    pub fn asset_dim(&self) -> usize {
        self.coeffs.asset_dim()
    }

    pub fn factor_dim(&self) -> usize {
        self.coeffs.factor_dim()
    }

    pub fn brownian_dim(&self) -> usize {
        self.asset_dim() + self.factor_dim()
    }

    pub fn s0(&self) -> &[f64] {
        &self.s0
    }

    pub fn r0(&self) -> &[f64] {
        &self.r0
    }

    pub fn state_box(&self) -> &StateBox {
        &self.state_box
    }

    /// Full `n x n` volatility block `[[sigma_l, 0], [delta, sigma_perp]]`.
    pub fn full_vol(&self, t: f64, s: &[f64], r: &[f64]) -> DMatrix<f64> {
        let d = self.asset_dim();
        let k = self.factor_dim();
        let mut m = DMatrix::zeros(d + k, d + k);
        m.view_mut((0, 0), (d, d)).copy_from(&self.coeffs.asset_vol(t, s, r));
        if k > 0 {
            m.view_mut((d, 0), (k, d)).copy_from(&self.coeffs.factor_loading(t, s, r));
            m.view_mut((d, d), (k, k)).copy_from(&self.coeffs.factor_vol(t, s, r));
        }
        m
    }

    /// Samples the state box at five times and reports states where the
    /// coefficients are non-finite or the smallest singular value of the
    /// full volatility block falls below the configured floor.
    pub fn check_conditions(&self, horizon: f64) -> Vec<String> {
        let mut warnings = Vec::new();
        let lattice = self.state_box.lattice();
        for i in 0..5 {
            let t = horizon * i as f64 / 4.0;
            for (s, r) in &lattice {
                let vol = self.full_vol(t, s, r);
                let mu = self.coeffs.drift(t, s, r);
                let b = self.coeffs.factor_drift(t, s, r);
                if vol.iter().chain(mu.iter()).chain(b.iter()).any(|v| !v.is_finite()) {
                    warnings.push(format!("non-finite coefficient at t={t}, s={s:?}, r={r:?}"));
                    continue;
                }
                if let Some(floor) = self.ellipticity_floor {
                    let smallest = vol
                        .singular_values()
                        .iter()
                        .cloned()
                        .fold(f64::INFINITY, f64::min);
                    if smallest < floor {
                        warnings.push(format!(
                            "ellipticity: smallest singular value {smallest:.3e} < {floor:.1e} at t={t}, s={s:?}, r={r:?}"
                        ));
                    }
                }
            }
        }
        warnings
    }
}
