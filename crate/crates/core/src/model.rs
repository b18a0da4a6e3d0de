//! Multiscale factor model: coefficient catalog, validation, evaluation.
//!
//! The asset and factor dynamics are
//!
//! ```text
//! dS = mu(Y,Z) S dt + sigma(Y,Z) S dW
//! dY = (1/eps) b(Y) dt + (1/sqrt(eps)) a(Y) dW^Y
//! dZ = delta c(Z) dt + sqrt(delta) g(Z) dW^Z
//! ```
//!
//! Coefficients come from a closed analytic catalog rather than user-supplied
//! code: the averaging and Poisson machinery downstream needs smooth, bounded,
//! differentiable coefficients, and the catalog guarantees that by
//! construction. The Sharpe ratio `lambda = mu/sigma` must be bounded and its
//! square-average bounded away from zero.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Correlations of the three Brownian motions `(W, W^Y, W^Z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTriple {
    pub rho1: f64,
    pub rho2: f64,
    pub rho12: f64,
}

impl Default for CorrelationTriple {
    fn default() -> Self {
        Self { rho1: 0.0, rho2: 0.0, rho12: 0.0 }
    }
}

/// Outcome of a correlation-triple validity check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidityReport {
    /// `1 + 2 rho1 rho2 rho12 - rho1^2 - rho2^2 - rho12^2`; the covariance
    /// matrix of the Brownian triple is positive definite iff this is > 0
    /// (given each |rho| < 1).
    pub determinant_proxy: f64,
    pub pass: bool,
}

/// Check that the Brownian correlation matrix is positive definite.
pub fn validate_correlations(t: &CorrelationTriple) -> ValidityReport {
    let CorrelationTriple { rho1, rho2, rho12 } = *t;
    let proxy = 1.0 + 2.0 * rho1 * rho2 * rho12 - rho1 * rho1 - rho2 * rho2 - rho12 * rho12;
    let strict = rho1.abs() < 1.0 && rho2.abs() < 1.0 && rho12.abs() < 1.0;
    ValidityReport { determinant_proxy: proxy, pass: strict && proxy > 0.0 }
}

impl CorrelationTriple {
    pub fn validate(&self) -> Result<()> {
        let report = validate_correlations(self);
        if report.pass {
            Ok(())
        } else {
            Err(CoreError::InvalidCorrelation(format!(
                "(rho1, rho2, rho12) = ({}, {}, {}), determinant proxy = {}",
                self.rho1, self.rho2, self.rho12, report.determinant_proxy
            )))
        }
    }
}

/// Analytic coefficient family.
///
/// `TanhSharpe` is the workhorse: Ornstein-Uhlenbeck fast and slow factors
/// with `lambda(y,z) = lambda0 + lambda_z tanh(z) + lambda_y tanh(y)`, which
/// is bounded with bounded derivatives of all orders. `Constant` freezes the
/// Sharpe ratio entirely (all correction terms collapse to zero).  `AffineY`
/// has `lambda = lambda0 + slope * y`, which is unbounded for `slope != 0`
/// and is rejected at instantiation; it exists to exercise that check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "catalog", rename_all = "snake_case")]
pub enum Catalog {
    TanhSharpe {
        lambda0: f64,
        #[serde(default)]
        lambda_y: f64,
        #[serde(default)]
        lambda_z: f64,
        sigma0: f64,
        kappa_y: f64,
        #[serde(default)]
        m_y: f64,
        /// Fast-factor volatility a(y) = a0 (constant).
        a0: f64,
        kappa_z: f64,
        #[serde(default)]
        m_z: f64,
        /// Slow-factor volatility g(z) = g0 (constant).
        g0: f64,
    },
    Constant {
        mu0: f64,
        sigma0: f64,
        kappa_y: f64,
        #[serde(default)]
        m_y: f64,
        a0: f64,
        kappa_z: f64,
        #[serde(default)]
        m_z: f64,
        g0: f64,
    },
    AffineY {
        lambda0: f64,
        slope: f64,
        sigma0: f64,
        kappa_y: f64,
        #[serde(default)]
        m_y: f64,
        a0: f64,
        kappa_z: f64,
        #[serde(default)]
        m_z: f64,
        g0: f64,
    },
}

impl Catalog {
    fn fast_params(&self) -> (f64, f64, f64) {
        match *self {
            Catalog::TanhSharpe { kappa_y, m_y, a0, .. }
            | Catalog::Constant { kappa_y, m_y, a0, .. }
            | Catalog::AffineY { kappa_y, m_y, a0, .. } => (kappa_y, m_y, a0),
        }
    }

    fn slow_params(&self) -> (f64, f64, f64) {
        match *self {
            Catalog::TanhSharpe { kappa_z, m_z, g0, .. }
            | Catalog::Constant { kappa_z, m_z, g0, .. }
            | Catalog::AffineY { kappa_z, m_z, g0, .. } => (kappa_z, m_z, g0),
        }
    }

    fn sigma0(&self) -> f64 {
        match *self {
            Catalog::TanhSharpe { sigma0, .. }
            | Catalog::Constant { sigma0, .. }
            | Catalog::AffineY { sigma0, .. } => sigma0,
        }
    }
}

/// Top-level `[model]` table of a TOML config.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(flatten)]
    pub catalog: Catalog,
    #[serde(default)]
    pub rho1: f64,
    #[serde(default)]
    pub rho2: f64,
    #[serde(default)]
    pub rho12: f64,
    pub eps: f64,
    pub delta: f64,
    #[serde(rename = "T")]
    pub horizon_t: f64,
    /// Half-width of the working box in invariant standard deviations.
    #[serde(default = "default_halfwidth")]
    pub domain_halfwidth_sds: f64,
}

fn default_halfwidth() -> f64 {
    8.0
}

/// Coefficient values (and the partials the expansion machinery needs)
/// at a single point of the working domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoefficientValues {
    pub mu: f64,
    pub sigma: f64,
    pub lambda: f64,
    pub b: f64,
    pub a: f64,
    pub c: f64,
    pub g: f64,
    pub dlambda_dy: f64,
    pub dlambda_dz: f64,
    pub da_dy: f64,
    pub dg_dz: f64,
}

/// Validated, immutable model instance. Safe to share across threads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub catalog: Catalog,
    pub correlations: CorrelationTriple,
    pub eps: f64,
    pub delta: f64,
    pub horizon_t: f64,
    pub domain_halfwidth_sds: f64,
}

/// Build and validate a `ModelSpec` from a config.
pub fn instantiate_model(config: &ModelConfig) -> Result<ModelSpec> {
    let correlations =
        CorrelationTriple { rho1: config.rho1, rho2: config.rho2, rho12: config.rho12 };
    correlations.validate()?;

    if !(config.eps > 0.0) || !(config.delta >= 0.0) {
        return Err(CoreError::InvalidModel(format!(
            "scales must satisfy eps > 0, delta >= 0; got eps={}, delta={}",
            config.eps, config.delta
        )));
    }
    if !(config.horizon_t > 0.0) {
        return Err(CoreError::InvalidModel(format!("horizon T must be positive, got {}", config.horizon_t)));
    }

    match config.catalog {
        Catalog::AffineY { slope, .. } if slope != 0.0 => {
            return Err(CoreError::InvalidModel(
                "affine_y family has unbounded Sharpe ratio for slope != 0".into(),
            ));
        }
        _ => {}
    }

    let (kappa_y, _, a0) = config.catalog.fast_params();
    let (kappa_z, _, g0) = config.catalog.slow_params();
    if !(kappa_y > 0.0 && a0 > 0.0) {
        return Err(CoreError::InvalidModel("fast factor requires kappa_y > 0 and a0 > 0".into()));
    }
    if !(kappa_z > 0.0 && g0 >= 0.0) {
        return Err(CoreError::InvalidModel("slow factor requires kappa_z > 0 and g0 >= 0".into()));
    }
    if !(config.catalog.sigma0() > 0.0) {
        return Err(CoreError::InvalidModel("sigma0 must be positive".into()));
    }

    let spec = ModelSpec {
        catalog: config.catalog,
        correlations,
        eps: config.eps,
        delta: config.delta,
        horizon_t: config.horizon_t,
        domain_halfwidth_sds: config.domain_halfwidth_sds,
    };
    spec.check_partials_against_fd()?;
    Ok(spec)
}

impl ModelSpec {
    pub fn lambda(&self, y: f64, z: f64) -> f64 {
        match self.catalog {
            Catalog::TanhSharpe { lambda0, lambda_y, lambda_z, .. } => {
                lambda0 + lambda_z * z.tanh() + lambda_y * y.tanh()
            }
            Catalog::Constant { mu0, sigma0, .. } => mu0 / sigma0,
            Catalog::AffineY { lambda0, slope, .. } => lambda0 + slope * y,
        }
    }

    pub fn dlambda_dy(&self, y: f64, _z: f64) -> f64 {
        match self.catalog {
            Catalog::TanhSharpe { lambda_y, .. } => {
                let s = y.cosh();
                lambda_y / (s * s)
            }
            Catalog::Constant { .. } => 0.0,
            Catalog::AffineY { slope, .. } => slope,
        }
    }

    pub fn dlambda_dz(&self, _y: f64, z: f64) -> f64 {
        match self.catalog {
            Catalog::TanhSharpe { lambda_z, .. } => {
                let s = z.cosh();
                lambda_z / (s * s)
            }
            _ => 0.0,
        }
    }

    pub fn sigma(&self, _y: f64, _z: f64) -> f64 {
        self.catalog.sigma0()
    }

    pub fn mu(&self, y: f64, z: f64) -> f64 {
        self.lambda(y, z) * self.sigma(y, z)
    }

    pub fn b(&self, y: f64) -> f64 {
        let (kappa, m, _) = self.catalog.fast_params();
        kappa * (m - y)
    }

    pub fn a(&self, _y: f64) -> f64 {
        self.catalog.fast_params().2
    }

    pub fn da_dy(&self, _y: f64) -> f64 {
        0.0
    }

    pub fn c(&self, z: f64) -> f64 {
        let (kappa, m, _) = self.catalog.slow_params();
        kappa * (m - z)
    }

    pub fn dc_dz(&self, _z: f64) -> f64 {
        -self.catalog.slow_params().0
    }

    pub fn g(&self, _z: f64) -> f64 {
        self.catalog.slow_params().2
    }

    pub fn dg_dz(&self, _z: f64) -> f64 {
        0.0
    }

    /// True when `lambda` does not depend on y (all fast-factor correctors
    /// vanish identically).
    pub fn lambda_y_independent(&self) -> bool {
        match self.catalog {
            Catalog::TanhSharpe { lambda_y, .. } => lambda_y == 0.0,
            Catalog::Constant { .. } => true,
            Catalog::AffineY { slope, .. } => slope == 0.0,
        }
    }

    /// True when `lambda` does not depend on z (the averaged Sharpe ratios
    /// are flat and all slow-channel correctors vanish identically).
    pub fn lambda_z_independent(&self) -> bool {
        match self.catalog {
            Catalog::TanhSharpe { lambda_z, .. } => lambda_z == 0.0,
            _ => true,
        }
    }

    /// Mean of the fast-factor invariant distribution.
    pub fn fast_mean(&self) -> f64 {
        self.catalog.fast_params().1
    }

    /// Standard deviation `a0 / sqrt(2 kappa_y)` of the fast-factor
    /// invariant distribution (OU catalog).
    pub fn fast_std(&self) -> f64 {
        let (kappa, _, a0) = self.catalog.fast_params();
        a0 / (2.0 * kappa).sqrt()
    }

    pub fn slow_mean(&self) -> f64 {
        self.catalog.slow_params().1
    }

    pub fn slow_std(&self) -> f64 {
        let (kappa, _, g0) = self.catalog.slow_params();
        g0 / (2.0 * kappa).sqrt()
    }

    /// Working box for y.
    pub fn y_domain(&self) -> (f64, f64) {
        let half = self.domain_halfwidth_sds * self.fast_std();
        (self.fast_mean() - half, self.fast_mean() + half)
    }

    /// Working box for z.
    pub fn z_domain(&self) -> (f64, f64) {
        let half = self.domain_halfwidth_sds * self.slow_std().max(1e-8);
        (self.slow_mean() - half, self.slow_mean() + half)
    }

    fn in_domain(&self, y: f64, z: f64) -> bool {
        let (ylo, yhi) = self.y_domain();
        let (zlo, zhi) = self.z_domain();
        y >= ylo && y <= yhi && z >= zlo && z <= zhi
    }

    /// Evaluate all coefficients and the partials used downstream.
    pub fn eval_coefficients(&self, y: f64, z: f64) -> Result<CoefficientValues> {
        if !self.in_domain(y, z) {
            return Err(CoreError::DomainViolation(format!("(y, z) = ({y}, {z})")));
        }
        let sigma = self.sigma(y, z);
        let lambda = self.lambda(y, z);
        Ok(CoefficientValues {
            mu: lambda * sigma,
            sigma,
            lambda,
            b: self.b(y),
            a: self.a(y),
            c: self.c(z),
            g: self.g(z),
            dlambda_dy: self.dlambda_dy(y, z),
            dlambda_dz: self.dlambda_dz(y, z),
            da_dy: self.da_dy(y),
            dg_dz: self.dg_dz(z),
        })
    }

    /// Consistency probe run at instantiation: analytic partials of lambda
    /// must agree with central finite differences on a 50-point grid.
    fn check_partials_against_fd(&self) -> Result<()> {
        let (ylo, yhi) = self.y_domain();
        let (zlo, zhi) = self.z_domain();
        let h = 1e-5;
        let n = 50;
        for i in 0..n {
            let s = (i as f64 + 0.5) / n as f64;
            let y = ylo + s * (yhi - ylo);
            let z = zlo + s * (zhi - zlo);
            let fd_y = (self.lambda(y + h, z) - self.lambda(y - h, z)) / (2.0 * h);
            let fd_z = (self.lambda(y, z + h) - self.lambda(y, z - h)) / (2.0 * h);
            let ay = self.dlambda_dy(y, z);
            let az = self.dlambda_dz(y, z);
            let scale = 1.0 + ay.abs().max(az.abs());
            if (fd_y - ay).abs() > 1e-6 * scale || (fd_z - az).abs() > 1e-6 * scale {
                return Err(CoreError::InvalidModel(format!(
                    "analytic partials disagree with finite differences at (y, z) = ({y}, {z})"
                )));
            }
        }
        Ok(())
    }
}

/// Default model used by the CLI and tests: OU fast and slow factors with a
/// tanh-bounded Sharpe ratio.
pub fn default_tanh_model(eps: f64, delta: f64) -> ModelSpec {
    let config = ModelConfig {
        catalog: Catalog::TanhSharpe {
            lambda0: 0.3,
            lambda_y: 0.2,
            lambda_z: 0.0,
            sigma0: 0.5,
            kappa_y: 1.0,
            m_y: 0.0,
            a0: std::f64::consts::SQRT_2,
            kappa_z: 1.0,
            m_z: 0.0,
            g0: 1.0,
        },
        rho1: -0.4,
        rho2: -0.3,
        rho12: 0.0,
        eps,
        delta,
        horizon_t: 1.0,
        domain_halfwidth_sds: 8.0,
    };
    instantiate_model(&config).expect("default model must validate")
}
