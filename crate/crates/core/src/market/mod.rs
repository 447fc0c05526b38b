//! Diffusion market model, path simulation and the semimartingale
//! primitives built on it.

mod model;
mod paths;
mod risk;
mod wealth;

pub use model::{
    BlackScholes, Coefficients, LocalVolatility, MarketModel, OuFactor, StateBox, DEFAULT_ELLIPTICITY_FLOOR,
};
pub use paths::{mean_stderr, simulate_paths, PathEnsemble, PathProcess, TimeGrid};
pub use risk::{
    market_price_of_risk, mean_variance_tradeoff, stochastic_exponential, ExponentIncrements, RiskPrice,
    StochasticExponential,
};
pub(crate) use risk::check_shape;
pub use wealth::{integrate_wealth, FeedbackFn, StrategyKind, StrategyRule, WealthPaths};
