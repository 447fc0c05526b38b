use thiserror::Error;

pub type Result<T> = std::result::Result<T, LabError>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("model validation failed: {0}")]
    ModelValidation(String),

    #[error("singular volatility matrix (condition number {condition:.3e}) at t={t}")]
    Singular { t: f64, condition: f64 },

    #[error("argument outside the utility domain: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite strategy output on path {path}, step {step}")]
    NonFinite { path: usize, step: usize },

    #[error("not applicable: {0}")]
    NotApplicable(String),

    #[error("evaluation outside the representation domain: {0}")]
    Extrapolation(String),

    #[error("grid resolution too coarse: {0}")]
    GridResolution(String),

    #[error("solver quality check failed: {0}")]
    SolverQuality(String),

    #[error("picard iteration diverged at step {step} (iterate change {change:.3e})")]
    Divergence { step: usize, change: f64 },

    #[error("concavity violated: {0}")]
    Concavity(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
