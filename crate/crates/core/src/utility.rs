//! Utility families and numeric verification of their regularity.
//!
//! Four families are supported on wealth `x > 0`:
//!
//! * power: `U(x) = x^(1-gamma) / (1-gamma)`, `gamma > 0`, `gamma != 1`
//! * log: `U(x) = ln x`
//! * mixture of powers: `U(x) = sum w_i x^(1-gamma_i) / (1-gamma_i)`
//! * sum of inverse marginal powers: `I(y) = sum w_i y^(-1/gamma_i)` with
//!   `U' = I^(-1)` and `U` recovered in closed form via `U = x U' - J(U')`,
//!   `J = int I`.
//!
//! The mixtures have wealth-dependent relative risk aversion, which is what
//! makes the general-utility machinery non-trivial. Derivatives up to fourth
//! order are exposed because the H-transform heat solve co-evolves spatial
//! derivatives of its terminal data `I(e^{-x})`.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// `[utility]` table of a TOML config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum UtilityConfig {
    Power { gamma: f64 },
    Log,
    MixturePowers { weights: Vec<f64>, gammas: Vec<f64> },
    InverseMarginalMixture { weights: Vec<f64>, gammas: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
enum Family {
    Power { gamma: f64 },
    Log,
    /// U'(x) = sum w_i x^{-g_i}
    MixturePowers { weights: Vec<f64>, gammas: Vec<f64> },
    /// I(y) = sum w_i y^{-1/g_i}
    InverseMarginalMixture { weights: Vec<f64>, gammas: Vec<f64> },
}

/// Validated utility with closed-form evaluators.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilitySpec {
    family: Family,
}

/// Construct and validate a utility.
pub fn make_utility(config: &UtilityConfig) -> Result<UtilitySpec> {
    let family = match config {
        UtilityConfig::Power { gamma } => {
            if !(*gamma > 0.0) || *gamma == 1.0 {
                return Err(CoreError::InvalidUtility(format!(
                    "power family needs gamma > 0, gamma != 1; got {gamma} (use the log family for gamma = 1)"
                )));
            }
            Family::Power { gamma: *gamma }
        }
        UtilityConfig::Log => Family::Log,
        UtilityConfig::MixturePowers { weights, gammas } => {
            validate_mixture(weights, gammas)?;
            Family::MixturePowers { weights: weights.clone(), gammas: gammas.clone() }
        }
        UtilityConfig::InverseMarginalMixture { weights, gammas } => {
            validate_mixture(weights, gammas)?;
            Family::InverseMarginalMixture { weights: weights.clone(), gammas: gammas.clone() }
        }
    };
    let spec = UtilitySpec { family };
    spec.probe()?;
    Ok(spec)
}

fn validate_mixture(weights: &[f64], gammas: &[f64]) -> Result<()> {
    if weights.is_empty() || weights.len() != gammas.len() {
        return Err(CoreError::InvalidUtility(
            "mixture requires equal-length, non-empty weights and gammas".into(),
        ));
    }
    if weights.iter().any(|&w| !(w > 0.0)) {
        return Err(CoreError::InvalidUtility(
            "mixture weights must all be positive (otherwise concavity can fail)".into(),
        ));
    }
    if gammas.iter().any(|&g| !(g > 0.0)) {
        return Err(CoreError::InvalidUtility("mixture gammas must all be positive".into()));
    }
    Ok(())
}

impl UtilitySpec {
    pub fn power(gamma: f64) -> Result<Self> {
        make_utility(&UtilityConfig::Power { gamma })
    }

    pub fn log() -> Self {
        UtilitySpec { family: Family::Log }
    }

    /// True for the families whose Merton problem has a closed form.
    pub fn power_gamma(&self) -> Option<f64> {
        match self.family {
            Family::Power { gamma } => Some(gamma),
            _ => None,
        }
    }

    pub fn is_log(&self) -> bool {
        matches!(self.family, Family::Log)
    }

    pub fn u(&self, x: f64) -> f64 {
        match &self.family {
            Family::Power { gamma } => x.powf(1.0 - gamma) / (1.0 - gamma),
            Family::Log => x.ln(),
            Family::MixturePowers { weights, gammas } => weights
                .iter()
                .zip(gammas)
                .map(|(&w, &g)| {
                    if (g - 1.0).abs() < 1e-12 {
                        w * x.ln()
                    } else {
                        w * x.powf(1.0 - g) / (1.0 - g)
                    }
                })
                .sum(),
            Family::InverseMarginalMixture { weights, gammas } => {
                // U(x) = x U'(x) - J(U'(x)), J = int I dy (closed form).
                let y = self.u1(x);
                let j: f64 = weights
                    .iter()
                    .zip(gammas)
                    .map(|(&w, &g)| {
                        let p = 1.0 - 1.0 / g;
                        if p.abs() < 1e-12 {
                            w * y.ln()
                        } else {
                            w * y.powf(p) / p
                        }
                    })
                    .sum();
                x * y - j
            }
        }
    }

    /// Marginal utility U'.
    pub fn u1(&self, x: f64) -> f64 {
        match &self.family {
            Family::Power { gamma } => x.powf(-gamma),
            Family::Log => 1.0 / x,
            Family::MixturePowers { weights, gammas } => {
                weights.iter().zip(gammas).map(|(&w, &g)| w * x.powf(-g)).sum()
            }
            Family::InverseMarginalMixture { weights, gammas } => {
                invert_decreasing(x, |y| mixture_i(weights, gammas, y, 0), |y| {
                    mixture_i(weights, gammas, y, 1)
                })
            }
        }
    }

    pub fn u2(&self, x: f64) -> f64 {
        match &self.family {
            Family::Power { gamma } => -gamma * x.powf(-gamma - 1.0),
            Family::Log => -1.0 / (x * x),
            Family::MixturePowers { weights, gammas } => {
                weights.iter().zip(gammas).map(|(&w, &g)| -w * g * x.powf(-g - 1.0)).sum()
            }
            Family::InverseMarginalMixture { weights, gammas } => {
                let y = self.u1(x);
                1.0 / mixture_i(weights, gammas, y, 1)
            }
        }
    }

    pub fn u3(&self, x: f64) -> f64 {
        match &self.family {
            Family::Power { gamma } => gamma * (gamma + 1.0) * x.powf(-gamma - 2.0),
            Family::Log => 2.0 / (x * x * x),
            Family::MixturePowers { weights, gammas } => weights
                .iter()
                .zip(gammas)
                .map(|(&w, &g)| w * g * (g + 1.0) * x.powf(-g - 2.0))
                .sum(),
            Family::InverseMarginalMixture { weights, gammas } => {
                let y = self.u1(x);
                let u2 = self.u2(x);
                -mixture_i(weights, gammas, y, 2) * u2 * u2 * u2
            }
        }
    }

    pub fn u4(&self, x: f64) -> f64 {
        match &self.family {
            Family::Power { gamma } => {
                -gamma * (gamma + 1.0) * (gamma + 2.0) * x.powf(-gamma - 3.0)
            }
            Family::Log => -6.0 / (x * x * x * x),
            Family::MixturePowers { weights, gammas } => weights
                .iter()
                .zip(gammas)
                .map(|(&w, &g)| -w * g * (g + 1.0) * (g + 2.0) * x.powf(-g - 3.0))
                .sum(),
            Family::InverseMarginalMixture { weights, gammas } => {
                let y = self.u1(x);
                let u2 = self.u2(x);
                let u3 = self.u3(x);
                let i2 = mixture_i(weights, gammas, y, 2);
                let i3 = mixture_i(weights, gammas, y, 3);
                -i3 * u2 * u2 * u2 * u2 - 3.0 * i2 * u2 * u2 * u3
            }
        }
    }

    /// Risk tolerance `R = -U'/U''`.
    pub fn r(&self, x: f64) -> f64 {
        match &self.family {
            Family::Power { gamma } => x / gamma,
            Family::Log => x,
            _ => -self.u1(x) / self.u2(x),
        }
    }

    /// `R' = -1 + U' U''' / U''^2`.
    pub fn r1(&self, x: f64) -> f64 {
        match &self.family {
            Family::Power { gamma } => 1.0 / gamma,
            Family::Log => 1.0,
            _ => {
                let u1 = self.u1(x);
                let u2 = self.u2(x);
                let u3 = self.u3(x);
                -1.0 + u1 * u3 / (u2 * u2)
            }
        }
    }

    /// Inverse marginal utility `I = (U')^{-1}`.
    pub fn i(&self, y: f64) -> f64 {
        match &self.family {
            Family::Power { gamma } => y.powf(-1.0 / gamma),
            Family::Log => 1.0 / y,
            Family::MixturePowers { weights, gammas } => {
                // Solve U'(x) = y; U' is strictly decreasing in x.
                let w = weights.clone();
                let g = gammas.clone();
                invert_decreasing(y, move |x| mixture_marginal(&w, &g, x, 0), {
                    let w = weights.clone();
                    let g = gammas.clone();
                    move |x| mixture_marginal(&w, &g, x, 1)
                })
            }
            Family::InverseMarginalMixture { weights, gammas } => mixture_i(weights, gammas, y, 0),
        }
    }

    /// k-th derivative of I, k = 0..3.
    pub fn i_deriv(&self, y: f64, k: usize) -> f64 {
        match &self.family {
            Family::Power { gamma } => {
                let p = -1.0 / gamma;
                let mut c = 1.0;
                for j in 0..k {
                    c *= p - j as f64;
                }
                c * y.powf(p - k as f64)
            }
            Family::Log => {
                let mut c = 1.0;
                for j in 0..k {
                    c *= -1.0 - j as f64;
                }
                c * y.powf(-1.0 - k as f64)
            }
            Family::InverseMarginalMixture { weights, gammas } => mixture_i(weights, gammas, y, k),
            Family::MixturePowers { .. } => {
                // Inverse-function derivatives at x = I(y).
                let x = self.i(y);
                let u2 = self.u2(x);
                match k {
                    0 => x,
                    1 => 1.0 / u2,
                    2 => -self.u3(x) / (u2 * u2 * u2),
                    3 => {
                        let u3 = self.u3(x);
                        let u4 = self.u4(x);
                        (3.0 * u3 * u3 - u2 * u4) / u2.powi(5)
                    }
                    _ => panic!("I derivatives available up to order 3"),
                }
            }
        }
    }

    /// Asymptotic growth rate of `I(e^{-xi})` as `xi -> +inf` (large wealth)
    /// and `xi -> -inf`; used for heat-solve boundary data.
    pub fn i_exp_rates(&self) -> (f64, f64) {
        match &self.family {
            Family::Power { gamma } => (1.0 / gamma, 1.0 / gamma),
            Family::Log => (1.0, 1.0),
            Family::MixturePowers { gammas, .. } => {
                let gmin = gammas.iter().cloned().fold(f64::INFINITY, f64::min);
                let gmax = gammas.iter().cloned().fold(0.0_f64, f64::max);
                (1.0 / gmin, 1.0 / gmax)
            }
            Family::InverseMarginalMixture { gammas, .. } => {
                let gmin = gammas.iter().cloned().fold(f64::INFINITY, f64::min);
                let gmax = gammas.iter().cloned().fold(0.0_f64, f64::max);
                (1.0 / gmin, 1.0 / gmax)
            }
        }
    }

    /// Spec-shaped evaluation bundle `(U, U', U'', R, R', I(U'(x)))`.
    pub fn eval(&self, x: f64) -> Result<(f64, f64, f64, f64, f64, f64)> {
        if !(x > 0.0) {
            return Err(CoreError::InvalidUtility(format!("wealth must be positive, got {x}")));
        }
        Ok((self.u(x), self.u1(x), self.u2(x), self.r(x), self.r1(x), self.i(self.u1(x))))
    }

    /// Construction-time probe of the standing utility assumptions.
    fn probe(&self) -> Result<()> {
        let grid = probe_grid();
        let mut prev_r = 0.0;
        for (k, &x) in grid.iter().enumerate() {
            let u1 = self.u1(x);
            let u2 = self.u2(x);
            if !(u1 > 0.0) || !(u2 < 0.0) {
                return Err(CoreError::InvalidUtility(format!(
                    "monotonicity/concavity probe failed at x = {x}: U' = {u1}, U'' = {u2}"
                )));
            }
            let r = self.r(x);
            if k > 0 && r <= prev_r {
                return Err(CoreError::InvalidUtility(format!(
                    "risk tolerance not strictly increasing near x = {x}"
                )));
            }
            prev_r = r;
            let round_trip = self.i(u1);
            if (round_trip - x).abs() > 1e-10 * x {
                return Err(CoreError::InvalidUtility(format!(
                    "I(U'(x)) round trip failed at x = {x}: got {round_trip}"
                )));
            }
        }
        Ok(())
    }
}

fn probe_grid() -> Vec<f64> {
    let n = 60;
    (0..n).map(|i| 10f64.powf(-3.0 + 6.0 * i as f64 / (n - 1) as f64)).collect()
}

/// `I(y)` for the inverse-marginal mixture, with derivatives.
fn mixture_i(weights: &[f64], gammas: &[f64], y: f64, k: usize) -> f64 {
    weights
        .iter()
        .zip(gammas)
        .map(|(&w, &g)| {
            let p = -1.0 / g;
            let mut c = 1.0;
            for j in 0..k {
                c *= p - j as f64;
            }
            w * c * y.powf(p - k as f64)
        })
        .sum()
}

/// `U'(x)` (k = 0) or `U''(x)` (k = 1) for the power mixture.
fn mixture_marginal(weights: &[f64], gammas: &[f64], x: f64, k: usize) -> f64 {
    weights
        .iter()
        .zip(gammas)
        .map(|(&w, &g)| if k == 0 { w * x.powf(-g) } else { -w * g * x.powf(-g - 1.0) })
        .sum()
}

/// Solve `f(s) = target` for a strictly decreasing positive `f` on (0, inf),
/// by bisection on log-scale followed by Newton polishing.
fn invert_decreasing<F, D>(target: f64, f: F, df: D) -> f64
where
    F: Fn(f64) -> f64,
    D: Fn(f64) -> f64,
{
    debug_assert!(target > 0.0);
    let mut lo = -60.0_f64; // log-scale bracket
    let mut hi = 60.0_f64;
    // f(e^lo) > target > f(e^hi)
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid.exp()) > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-3 {
            break;
        }
    }
    let mut s = (0.5 * (lo + hi)).exp();
    for _ in 0..60 {
        let fs = f(s);
        let step = (fs - target) / df(s);
        let mut s_new = s - step;
        if !(s_new > 0.0) {
            s_new = 0.5 * s;
        }
        if (s_new - s).abs() <= 1e-15 * s.abs() {
            s = s_new;
            break;
        }
        s = s_new;
    }
    s
}

// ---------------------------------------------------------------------------
// Assumption report
// ---------------------------------------------------------------------------

/// Measured suprema and proxies for the standing utility assumptions.
///
/// The bound constant `K` in the smoothness assumption is never quantified,
/// so the report records measured grid suprema rather than asserting a
/// particular value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssumptionReport {
    /// Grid sup of `|d^i/dx^i R(x)^i|` for i = 2..=7.
    pub sup_dxi_ri: Vec<f64>,
    /// `x U'(x) / U(x)` at the largest probe point (finite-x proxy of the
    /// asymptotic elasticity, which must be < 1).
    pub ae_proxy: f64,
    /// Fitted exponent alpha of `I(y) ~ y^{-alpha}` as `y -> 0`.
    pub i_growth_exponent: f64,
    /// `U'` at probe points `10^{-k}` is increasing toward +inf.
    pub inada_zero_ok: bool,
    /// `U'` at probe points `10^{+k}` is decreasing toward 0.
    pub inada_inf_ok: bool,
    /// `R(0+) -> 0` trend on the probe sequence.
    pub r_vanishes_at_zero: bool,
    /// min/max of `R'` over the grid (distinct for wealth-dependent
    /// risk aversion).
    pub r1_min: f64,
    pub r1_max: f64,
    pub all_finite: bool,
}

/// Numerically probe the utility assumptions on a wealth grid.
pub fn check_assumption_u(spec: &UtilitySpec, grid: &[f64]) -> AssumptionReport {
    let mut sup_dxi_ri = Vec::with_capacity(6);
    for i in 2..=7 {
        let mut sup = 0.0_f64;
        for &x in grid {
            let v = match spec.family {
                Family::Power { gamma } => factorial(i) / gamma.powi(i as i32),
                Family::Log => factorial(i),
                _ => nth_derivative(|s| spec.r(s).powi(i as i32), x, i),
            };
            sup = sup.max(v.abs());
        }
        sup_dxi_ri.push(sup);
    }

    let x_big = 1e6;
    let ae_proxy = x_big * spec.u1(x_big) / spec.u(x_big);

    // Fit I(y) ~ y^-alpha on small y by log-log regression.
    let ys: Vec<f64> = (1..=6).map(|k| 10f64.powi(-k)).collect();
    let pts: Vec<(f64, f64)> = ys.iter().map(|&y| (y.ln(), spec.i(y).ln())).collect();
    let slope = least_squares_slope(&pts);
    let i_growth_exponent = -slope;

    let mut inada_zero_ok = true;
    let mut inada_inf_ok = true;
    let mut r_vanishes_at_zero = true;
    let mut prev_small = f64::NEG_INFINITY;
    let mut prev_big = f64::INFINITY;
    let mut prev_r = f64::INFINITY;
    for k in 1..=8 {
        let u1_small = spec.u1(10f64.powi(-k));
        let u1_big = spec.u1(10f64.powi(k));
        let r_small = spec.r(10f64.powi(-k));
        inada_zero_ok &= u1_small > prev_small;
        inada_inf_ok &= u1_big < prev_big;
        r_vanishes_at_zero &= r_small < prev_r && r_small > 0.0;
        prev_small = u1_small;
        prev_big = u1_big;
        prev_r = r_small;
    }
    r_vanishes_at_zero &= spec.r(1e-8) < 1e-6;

    let mut r1_min = f64::INFINITY;
    let mut r1_max = f64::NEG_INFINITY;
    for &x in grid {
        let r1 = spec.r1(x);
        r1_min = r1_min.min(r1);
        r1_max = r1_max.max(r1);
    }

    let all_finite = sup_dxi_ri.iter().all(|v| v.is_finite())
        && ae_proxy.is_finite()
        && i_growth_exponent.is_finite()
        && r1_min.is_finite()
        && r1_max.is_finite();

    AssumptionReport {
        sup_dxi_ri,
        ae_proxy,
        i_growth_exponent,
        inada_zero_ok,
        inada_inf_ok,
        r_vanishes_at_zero,
        r1_min,
        r1_max,
        all_finite,
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// i-th derivative by central binomial differences with one Richardson step.
fn nth_derivative<F: Fn(f64) -> f64>(f: F, x: f64, i: usize) -> f64 {
    let stencil = |h: f64| -> f64 {
        let mut acc = 0.0;
        let mut binom = 1.0;
        for k in 0..=i {
            let node = x + (i as f64 / 2.0 - k as f64) * h;
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            acc += sign * binom * f(node);
            binom *= (i - k) as f64 / (k + 1) as f64;
        }
        acc / h.powi(i as i32)
    };
    let h = 0.25 * x.max(0.05);
    let d1 = stencil(h);
    let d2 = stencil(h / 2.0);
    (4.0 * d2 - d1) / 3.0
}

fn least_squares_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}
