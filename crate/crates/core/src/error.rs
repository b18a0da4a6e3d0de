//! Error type shared across the crate.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum CoreError {
    #[error("unknown catalog family: {0}")]
    UnknownCatalog(String),

    #[error("invalid correlation triple: {0}")]
    InvalidCorrelation(String),

    #[error("invalid model parameter: {0}")]
    InvalidModel(String),

    #[error("invalid utility parameter: {0}")]
    InvalidUtility(String),

    #[error("point outside working domain: {0}")]
    DomainViolation(String),

    #[error("quadrature did not converge: {0}")]
    QuadratureFailure(String),

    #[error("Poisson solve failed: {0}")]
    PoissonFailure(String),

    #[error("PDE solve failed: {0}")]
    PdeFailure(String),

    #[error("derivative order {requested} exceeds smoothness budget {budget}")]
    DerivativeBudget { requested: usize, budget: usize },

    #[error("concavity failure: V_xx = {vxx} is not negative at the evaluation point")]
    ConcavityFailure { vxx: f64 },

    #[error("calibration cap exceeded: no constant up to 2^{cap_log2} verifies at eps={eps}, delta={delta}; binding constraint: {binding}")]
    CalibrationCap {
        cap_log2: u32,
        eps: f64,
        delta: f64,
        binding: String,
    },

    #[error("oracle not applicable: {0}")]
    OracleInapplicable(String),

    #[error("simulation error: {0}")]
    Simulation(String),

    #[error("insufficient samples for a confidence interval: have {0}, need at least 30")]
    TooFewSamples(usize),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
