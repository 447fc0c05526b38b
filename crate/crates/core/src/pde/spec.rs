use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{LabError, Result};
use crate::market::{market_price_of_risk, MarketModel};

/// Which value equation a grid solve targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PdeKind {
    /// `v(t, log s)` under the `Q(q)` drift with potential `(q(q-1)/2) theta^2`.
    AlmostCompletePower { q: f64 },
    /// `v(t, r)` with potential `-(q/2) theta^2`.
    FactorPower { q: f64 },
    /// Additive log part: source `theta^2 / 2`, terminal 0.
    LogLinear,
    /// Exponent of the exponential value under the minimal martingale
    /// measure: source `-theta^2 / 2`, terminal `gamma g`.
    ExponentialMinimal { gamma: f64 },
    /// One-dimensional Bellman equation for the power value factor.
    SemilinearPower { q: f64 },
}

impl PdeKind {
    pub fn is_linear(&self) -> bool {
        !matches!(self, PdeKind::SemilinearPower { .. })
    }

    pub fn is_multiplicative(&self) -> bool {
        matches!(
            self,
            PdeKind::AlmostCompletePower { .. } | PdeKind::FactorPower { .. } | PdeKind::SemilinearPower { .. }
        )
    }

    pub fn label(&self) -> &'static str {
        match self {
            PdeKind::AlmostCompletePower { .. } => "almost_complete_power",
            PdeKind::FactorPower { .. } => "factor_power",
            PdeKind::LogLinear => "log_linear",
            PdeKind::ExponentialMinimal { .. } => "exponential_minimal",
            PdeKind::SemilinearPower { .. } => "semilinear_power",
        }
    }
}

/// Spatial coordinate of a one-dimensional reduction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Coordinate {
    /// `x = log s` of the single asset, factors frozen at `r0`.
    LogPrice,
    /// `x = r` of the single factor, assets frozen at `s0`.
    Factor,
}

/// Coefficients of
///
/// ```text
/// v_t + a/2 v_xx + b v_x + k v + f = (q/2) c2 v_x^2 / v   (semilinear only)
/// ```
///
/// at one point. For the semilinear kind `b` and `k` already contain the
/// linear parts of the expanded nonlinearity and `c2` multiplies the
/// remaining explicit term.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LocalCoefficients {
    pub diffusion: f64,
    pub drift: f64,
    pub potential: f64,
    pub source: f64,
    pub c2: f64,
}

pub type LocalFn = Arc<dyn Fn(f64, f64) -> LocalCoefficients + Send + Sync>;
pub type TerminalFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct PdeSpec {
    pub kind: PdeKind,
    pub coordinate: Option<Coordinate>,
    pub horizon: f64,
    pub lo: f64,
    pub hi: f64,
    pub x0: f64,
    pub n_space: usize,
    pub n_time: usize,
    pub local: LocalFn,
    pub terminal: TerminalFn,
    pub warnings: Vec<String>,
}

impl fmt::Debug for PdeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PdeSpec")
            .field("kind", &self.kind)
            .field("coordinate", &self.coordinate)
            .field("horizon", &self.horizon)
            .field("lo", &self.lo)
            .field("hi", &self.hi)
            .field("x0", &self.x0)
            .field("n_space", &self.n_space)
            .field("n_time", &self.n_time)
            .finish()
    }
}

pub const MIN_RESOLUTION: usize = 16;
pub const DOMAIN_STDS: f64 = 5.0;

/// Diffusion-model quantities at one point of a coordinate.
#[derive(Debug, Clone, Copy)]
struct ModelPoint {
    /// Generator coefficients of the coordinate under the physical measure.
    a: f64,
    b: f64,
    /// `|c|^2`, `c . theta`, `|theta|^2` where `c` is the loading of the
    /// coordinate on the asset Brownian motions.
    c2: f64,
    c_theta: f64,
    theta2: f64,
}

fn model_point(model: &MarketModel, coordinate: Coordinate, t: f64, x: f64) -> Result<ModelPoint> {
    let coeffs = model.coefficients();
    match coordinate {
        Coordinate::LogPrice => {
            let s = [x.exp()];
            let r = model.r0();
            let sigma = coeffs.asset_vol(t, &s, r)[(0, 0)];
            let mu = coeffs.drift(t, &s, r)[0];
            if sigma.abs() < 1e-300 {
                return Err(LabError::Singular { t, condition: f64::INFINITY });
            }
            let theta = mu / sigma;
            Ok(ModelPoint {
                a: sigma * sigma,
                b: mu - 0.5 * sigma * sigma,
                c2: sigma * sigma,
                c_theta: sigma * theta,
                theta2: theta * theta,
            })
        }
        Coordinate::Factor => {
            let s = model.s0();
            let r = [x];
            let theta = if model.asset_dim() == 1 {
                let sigma = coeffs.asset_vol(t, s, &r)[(0, 0)];
                if sigma.abs() < 1e-300 {
                    return Err(LabError::Singular { t, condition: f64::INFINITY });
                }
                vec![coeffs.drift(t, s, &r)[0] / sigma]
            } else {
                market_price_of_risk(model, t, s, &r)?.theta.iter().cloned().collect()
            };
            let delta = coeffs.factor_loading(t, s, &r);
            let perp = coeffs.factor_vol(t, s, &r);
            let c2: f64 = delta.row(0).iter().map(|v| v * v).sum();
            let p2: f64 = perp.row(0).iter().map(|v| v * v).sum();
            Ok(ModelPoint {
                a: c2 + p2,
                b: coeffs.factor_drift(t, s, &r)[0],
                c2,
                c_theta: delta.row(0).iter().zip(&theta).map(|(a, b)| a * b).sum(),
                theta2: theta.iter().map(|v| v * v).sum(),
            })
        }
    }
}

fn local_for(kind: PdeKind, p: ModelPoint) -> LocalCoefficients {
    match kind {
        PdeKind::AlmostCompletePower { q } => LocalCoefficients {
            diffusion: p.a,
            drift: p.b - q * p.c_theta,
            potential: 0.5 * q * (q - 1.0) * p.theta2,
            source: 0.0,
            c2: 0.0,
        },
        PdeKind::FactorPower { q } => LocalCoefficients {
            diffusion: p.a,
            drift: p.b,
            potential: -0.5 * q * p.theta2,
            source: 0.0,
            c2: 0.0,
        },
        PdeKind::LogLinear => LocalCoefficients {
            diffusion: p.a,
            drift: p.b,
            potential: 0.0,
            source: 0.5 * p.theta2,
            c2: 0.0,
        },
        PdeKind::ExponentialMinimal { .. } => LocalCoefficients {
            diffusion: p.a,
            drift: p.b - p.c_theta,
            potential: 0.0,
            source: -0.5 * p.theta2,
            c2: 0.0,
        },
        PdeKind::SemilinearPower { q } => LocalCoefficients {
            diffusion: p.a,
            drift: p.b - q * p.c_theta,
            potential: -0.5 * q * p.theta2,
            source: 0.0,
            c2: p.c2,
        },
    }
}

impl PdeSpec {
    /// Generic spec from local coefficients; the caller chooses the domain.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        kind: PdeKind,
        horizon: f64,
        lo: f64,
        hi: f64,
        x0: f64,
        n_space: usize,
        n_time: usize,
        local: LocalFn,
        terminal: TerminalFn,
    ) -> Result<Self> {
        let spec = Self {
            kind,
            coordinate: None,
            horizon,
            lo,
            hi,
            x0,
            n_space,
            n_time,
            local,
            terminal,
            warnings: Vec::new(),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Constant coefficients and terminal data on `[lo, hi]`.
    #[allow(clippy::too_many_arguments)]
    pub fn constant(
        kind: PdeKind,
        coefficients: LocalCoefficients,
        horizon: f64,
        lo: f64,
        hi: f64,
        n_space: usize,
        n_time: usize,
        terminal: TerminalFn,
    ) -> Result<Self> {
        Self::new(
            kind,
            horizon,
            lo,
            hi,
            0.5 * (lo + hi),
            n_space,
            n_time,
            Arc::new(move |_, _| coefficients),
            terminal,
        )
    }

    /// Reduction of a diffusion market to one coordinate. The domain is
    /// `DOMAIN_STDS` standard deviations of the (linearized) terminal
    /// distribution of the coordinate under the kind's drift, widened to
    /// contain the initial state.
    pub fn from_model(
        kind: PdeKind,
        coordinate: Coordinate,
        model: &MarketModel,
        horizon: f64,
        n_space: usize,
        n_time: usize,
    ) -> Result<Self> {
        let mut warnings = Vec::new();
        let x0 = match coordinate {
            Coordinate::LogPrice => {
                if model.asset_dim() != 1 {
                    return Err(LabError::NotApplicable("log-price reduction needs exactly one asset".into()));
                }
                if model.factor_dim() > 0 && depends_on_factor(model)? {
                    warnings.push("coefficients depend on the factor; frozen at r0".into());
                }
                model.s0()[0].ln()
            }
            Coordinate::Factor => {
                if model.factor_dim() != 1 {
                    return Err(LabError::NotApplicable("factor reduction needs exactly one factor".into()));
                }
                if depends_on_price(model)? {
                    warnings.push("market price of risk depends on the price; frozen at s0".into());
                }
                if matches!(kind, PdeKind::FactorPower { .. }) && loading_norm(model) > 0.0 {
                    warnings.push("factor is correlated with the assets; the linear reduction is not exact".into());
                }
                model.r0()[0]
            }
        };
        if matches!(kind, PdeKind::AlmostCompletePower { .. }) && coordinate != Coordinate::LogPrice {
            return Err(LabError::NotApplicable("the almost complete reduction lives in the log-price coordinate".into()));
        }
        if matches!(kind, PdeKind::FactorPower { .. }) && coordinate != Coordinate::Factor {
            return Err(LabError::NotApplicable("the factor reduction lives in the factor coordinate".into()));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(LabError::Domain(format!("horizon must be positive, got {horizon}")));
        }
        // probe once so coefficient errors surface here
        model_point(model, coordinate, 0.0, x0)?;
        let model_c = model.clone();
        let local: LocalFn = Arc::new(move |t, x| match model_point(&model_c, coordinate, t, x) {
            Ok(p) => local_for(kind, p),
            Err(_) => LocalCoefficients {
                diffusion: f64::NAN,
                ..Default::default()
            },
        });
        let (lo, hi) = terminal_domain(&local, x0, horizon);
        let terminal: TerminalFn = match kind {
            PdeKind::LogLinear | PdeKind::ExponentialMinimal { .. } => Arc::new(|_| 0.0),
            _ => Arc::new(|_| 1.0),
        };
        let mut spec = Self::new(kind, horizon, lo, hi, x0, n_space, n_time, local, terminal)?;
        spec.coordinate = Some(coordinate);
        spec.warnings = warnings;
        Ok(spec)
    }

    pub fn with_terminal(mut self, terminal: TerminalFn) -> Self {
        self.terminal = terminal;
        self
    }

    pub fn with_domain(mut self, lo: f64, hi: f64) -> Result<Self> {
        self.lo = lo;
        self.hi = hi;
        self.validate()?;
        Ok(self)
    }

    pub fn with_resolution(mut self, n_space: usize, n_time: usize) -> Result<Self> {
        self.n_space = n_space;
        self.n_time = n_time;
        self.validate()?;
        Ok(self)
    }

    pub fn dx(&self) -> f64 {
        (self.hi - self.lo) / (self.n_space - 1) as f64
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_time as f64
    }

    pub fn space(&self) -> Vec<f64> {
        let h = self.dx();
        (0..self.n_space)
            .map(|i| if i + 1 == self.n_space { self.hi } else { self.lo + h * i as f64 })
            .collect()
    }

    pub fn times(&self) -> Vec<f64> {
        let dt = self.dt();
        (0..=self.n_time)
            .map(|n| if n == self.n_time { self.horizon } else { dt * n as f64 })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if !(self.lo < self.hi) || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(LabError::Domain(format!("empty spatial domain [{}, {}]", self.lo, self.hi)));
        }
        if self.n_space < MIN_RESOLUTION || self.n_time < MIN_RESOLUTION {
            return Err(LabError::GridResolution(format!(
                "resolution {}x{} below the minimum {MIN_RESOLUTION}",
                self.n_space, self.n_time
            )));
        }
        if !(self.horizon > 0.0) {
            return Err(LabError::Domain(format!("horizon must be positive, got {}", self.horizon)));
        }
        Ok(())
    }
}

fn depends_on_factor(model: &MarketModel) -> Result<bool> {
    let s = model.s0();
    let r0 = model.r0();
    let base = market_price_of_risk(model, 0.0, s, r0)?.theta;
    for shift in [-1.0, 1.0] {
        let r: Vec<f64> = r0.iter().map(|v| v + shift).collect();
        if (market_price_of_risk(model, 0.0, s, &r)?.theta - &base).norm() > 1e-12 {
            return Ok(true);
        }
    }
    Ok(false)
}

fn depends_on_price(model: &MarketModel) -> Result<bool> {
    let s0 = model.s0();
    let r = model.r0();
    let base = market_price_of_risk(model, 0.0, s0, r)?.theta;
    for scale in [0.5, 2.0] {
        let s: Vec<f64> = s0.iter().map(|v| v * scale).collect();
        if (market_price_of_risk(model, 0.0, &s, r)?.theta - &base).norm() > 1e-12 {
            return Ok(true);
        }
    }
    Ok(false)
}

fn loading_norm(model: &MarketModel) -> f64 {
    model.coefficients().factor_loading(0.0, model.s0(), model.r0()).norm()
}

/// Mean and variance of the coordinate at the horizon from the linearized
/// moment equations `m' = b(m)`, `v' = 2 b_x(m) v + a(m)`.
fn terminal_domain(local: &LocalFn, x0: f64, horizon: f64) -> (f64, f64) {
    let steps = 1000;
    let dt = horizon / steps as f64;
    let (mut m, mut var) = (x0, 0.0);
    for i in 0..steps {
        let t = i as f64 * dt;
        let c = local(t, m);
        let h = 1e-5 * m.abs().max(1.0);
        let bx = (local(t, m + h).drift - local(t, m - h).drift) / (2.0 * h);
        m += c.drift * dt;
        var += (2.0 * bx * var + c.diffusion) * dt;
    }
    let sd = var.max(0.0).sqrt().max(1e-3 * x0.abs().max(1.0));
    (m.min(x0) - DOMAIN_STDS * sd, m.max(x0) + DOMAIN_STDS * sd)
}
