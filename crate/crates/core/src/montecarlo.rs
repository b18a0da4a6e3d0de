//! Monte Carlo simulation of the factor system and the wealth process.
//!
//! The three Brownian motions are correlated through a fixed Cholesky factor
//! of their correlation matrix. The fast factor is stepped with the
//! drift-implicit Euler variant whenever `eps < dt/10` (the explicit step is
//! unstable once the mean-reversion time drops below the step), the slow
//! factor explicitly. For proportional strategies the wealth is advanced in
//! log coordinates,
//!
//! ```text
//! d log X = p (mu dt + sigma dW) - 1/2 p^2 sigma^2 dt,  p = pi / X,
//! ```
//!
//! which keeps positivity structural; non-proportional strategies fall back
//! to arithmetic stepping with positivity-violation flagging.
//!
//! Randomness comes from per-path SplitMix64 streams keyed by
//! `(seed, path index)`, so path-level parallelism is bit-reproducible
//! regardless of worker scheduling; aggregation uses pairwise summation over
//! the path-indexed buffer.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::expansion::{ExpansionBundle, StrategyField};

/// Simulation parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    #[serde(default)]
    pub antithetic: bool,
    pub x0: f64,
    pub y0: f64,
    pub z0: f64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_paths == 0 || self.n_steps == 0 {
            return Err(CoreError::Simulation("need n_paths >= 1 and n_steps >= 1".into()));
        }
        if !(self.x0 > 0.0) {
            return Err(CoreError::Simulation(format!("x0 must be positive, got {}", self.x0)));
        }
        if self.antithetic && self.n_paths % 2 != 0 {
            return Err(CoreError::Simulation("antithetic pairing needs an even path count".into()));
        }
        Ok(())
    }
}

/// Terminal-sample summary plus admissibility diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathStats {
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    pub antithetic: bool,
    /// U(X_T) per path (path-indexed; deterministic for a fixed seed).
    pub terminal_utilities: Vec<f64>,
    pub mean_terminal_wealth: f64,
    pub positivity_violations: u64,
    /// Sample means of int (pi sigma v0_x)^2 dt and int (D1 v0)^2 dt.
    pub admissibility_proxy_pi: f64,
    pub admissibility_proxy_d1: f64,
}

impl PathStats {
    pub fn utility_mean(&self) -> f64 {
        pairwise_sum(&self.terminal_utilities) / self.terminal_utilities.len() as f64
    }

    pub fn utility_variance(&self) -> f64 {
        let m = self.utility_mean();
        let sq: Vec<f64> = self.terminal_utilities.iter().map(|u| (u - m) * (u - m)).collect();
        pairwise_sum(&sq) / (self.terminal_utilities.len() as f64 - 1.0)
    }

    /// Quantiles of U(X_T) at 5/25/50/75/95 percent.
    pub fn utility_quantiles(&self) -> [f64; 5] {
        let mut sorted = self.terminal_utilities.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let q = |p: f64| -> f64 {
            let idx = (p * (sorted.len() - 1) as f64).round() as usize;
            sorted[idx]
        };
        [q(0.05), q(0.25), q(0.50), q(0.75), q(0.95)]
    }
}

// ---------------------------------------------------------------------------
// Splittable RNG and the normal inverse CDF
// ---------------------------------------------------------------------------

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// SplitMix64 stream; `(seed, stream)` pairs give decorrelated sequences.
#[derive(Debug, Clone, Copy)]
pub struct SplitMix {
    state: u64,
}

impl SplitMix {
    pub fn for_path(seed: u64, path: u64) -> Self {
        let stream = mix64(0x9E3779B97F4A7C15u64.wrapping_mul(path.wrapping_add(1)));
        SplitMix { state: mix64(seed ^ stream) }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E3779B97F4A7C15);
        mix64(self.state)
    }

    /// Uniform in the open interval (0, 1).
    #[inline]
    pub fn next_uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / 9007199254740992.0)
    }

    #[inline]
    pub fn next_normal(&mut self) -> f64 {
        inverse_normal_cdf(self.next_uniform())
    }
}

/// Beasley-Springer-Moro inverse normal CDF.
pub fn inverse_normal_cdf(u: f64) -> f64 {
    const A: [f64; 4] = [2.50662823884, -18.61500062529, 41.39119773534, -25.44106049637];
    const B: [f64; 4] = [-8.47351093090, 23.08336743743, -21.06224101826, 3.13082909833];
    const C: [f64; 9] = [
        0.3374754822726147,
        0.9761690190917186,
        0.1607979714918209,
        0.0276438810333863,
        0.0038405729373609,
        0.0003951896511919,
        0.0000321767881768,
        0.0000002888167364,
        0.0000003960315187,
    ];
    let y = u - 0.5;
    if y.abs() < 0.42 {
        let r = y * y;
        y * (A[0] + r * (A[1] + r * (A[2] + r * A[3])))
            / (1.0 + r * (B[0] + r * (B[1] + r * (B[2] + r * B[3]))))
    } else {
        let r = if y > 0.0 { 1.0 - u } else { u };
        let s = (-(r.ln())).ln();
        let z = C[0]
            + s * (C[1]
                + s * (C[2]
                    + s * (C[3] + s * (C[4] + s * (C[5] + s * (C[6] + s * (C[7] + s * C[8])))))));
        if y < 0.0 {
            -z
        } else {
            z
        }
    }
}

/// Deterministic pairwise summation.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        2 => v[0] + v[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
        }
    }
}

/// Cholesky rows for the (W, W^Y, W^Z) correlation matrix.
#[derive(Debug, Clone, Copy)]
struct BrownianCholesky {
    c21: f64,
    c31: f64,
    c32: f64,
    c33: f64,
    rho1: f64,
}

impl BrownianCholesky {
    fn build(rho1: f64, rho2: f64, rho12: f64) -> Result<Self> {
        let c21 = (1.0 - rho1 * rho1).sqrt();
        if !(c21 > 0.0) {
            return Err(CoreError::Simulation("degenerate rho1".into()));
        }
        let c32 = (rho12 - rho1 * rho2) / c21;
        let rem = 1.0 - rho2 * rho2 - c32 * c32;
        if !(rem > 0.0) {
            return Err(CoreError::Simulation(
                "correlation matrix is not positive definite".into(),
            ));
        }
        Ok(BrownianCholesky { c21, c31: rho2, c32, c33: rem.sqrt(), rho1 })
    }

    /// Map independent normals to correlated increments (unit variance).
    #[inline]
    fn correlate(&self, z1: f64, z2: f64, z3: f64) -> (f64, f64, f64) {
        let dw = z1;
        let dwy = self.rho1 * z1 + self.c21 * z2;
        let dwz = self.c31 * z1 + self.c32 * z2 + self.c33 * z3;
        (dw, dwy, dwz)
    }
}

// ---------------------------------------------------------------------------
// Path simulation
// ---------------------------------------------------------------------------

struct PathOutcome {
    terminal_utility: f64,
    terminal_wealth: f64,
    violations: u64,
    proxy_pi: f64,
    proxy_d1: f64,
}

/// Simulate the wealth process under a Markov strategy and summarize the
/// terminal utility sample.
pub fn simulate_paths(
    bundle: &ExpansionBundle,
    strategy: &StrategyField<'_>,
    cfg: &SimConfig,
) -> Result<PathStats> {
    cfg.validate()?;
    let spec = &bundle.spec;
    let chol = BrownianCholesky::build(
        spec.correlations.rho1,
        spec.correlations.rho2,
        spec.correlations.rho12,
    )?;
    let outcomes: Vec<PathOutcome> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|p| simulate_one(bundle, strategy, cfg, &chol, p as u64))
        .collect::<Result<Vec<_>>>()?;

    let terminal_utilities: Vec<f64> = outcomes.iter().map(|o| o.terminal_utility).collect();
    let wealths: Vec<f64> = outcomes.iter().map(|o| o.terminal_wealth).collect();
    let proxy_pi: Vec<f64> = outcomes.iter().map(|o| o.proxy_pi).collect();
    let proxy_d1: Vec<f64> = outcomes.iter().map(|o| o.proxy_d1).collect();
    let violations: u64 = outcomes.iter().map(|o| o.violations).sum();
    let n = cfg.n_paths as f64;
    Ok(PathStats {
        n_paths: cfg.n_paths,
        n_steps: cfg.n_steps,
        seed: cfg.seed,
        antithetic: cfg.antithetic,
        terminal_utilities,
        mean_terminal_wealth: pairwise_sum(&wealths) / n,
        positivity_violations: violations,
        admissibility_proxy_pi: pairwise_sum(&proxy_pi) / n,
        admissibility_proxy_d1: pairwise_sum(&proxy_d1) / n,
    })
}

fn simulate_one(
    bundle: &ExpansionBundle,
    strategy: &StrategyField<'_>,
    cfg: &SimConfig,
    chol: &BrownianCholesky,
    path: u64,
) -> Result<PathOutcome> {
    let spec = &bundle.spec;
    let (stream_idx, negate) = if cfg.antithetic {
        (path / 2, path % 2 == 1)
    } else {
        (path, false)
    };
    let mut rng = SplitMix::for_path(cfg.seed, stream_idx);
    let sign = if negate { -1.0 } else { 1.0 };

    let big_t = spec.horizon_t;
    let dt = big_t / cfg.n_steps as f64;
    let sqdt = dt.sqrt();
    let eps = spec.eps;
    let delta = spec.delta;
    let implicit_fast = eps < dt / 10.0;
    let kappa_m = spec.fast_mean();

    // kappa from the linear catalog drift b(y) = kappa (m - y).
    let kappa = if spec.b(kappa_m + 1.0) != 0.0 {
        -(spec.b(kappa_m + 1.0) - spec.b(kappa_m)) / 1.0
    } else {
        1.0
    };

    let mut y = cfg.y0;
    let mut z = cfg.z0;
    let mut log_x = cfg.x0.ln();
    let mut x_arith = cfg.x0;
    let mut violations = 0u64;
    let mut proxy_pi = 0.0;
    let mut proxy_d1 = 0.0;

    let proportional = strategy.fraction(0.0, cfg.x0, cfg.y0, cfg.z0)?.is_some();

    for step in 0..cfg.n_steps {
        let t = dt * step as f64;
        let z1 = sign * rng.next_normal();
        let z2 = sign * rng.next_normal();
        let z3 = sign * rng.next_normal();
        let (dw, dwy, dwz) = chol.correlate(z1, z2, z3);
        let (dw, dwy, dwz) = (sqdt * dw, sqdt * dwy, sqdt * dwz);

        let lambda = spec.lambda(y, z);
        let sigma = spec.sigma(y, z);
        let mu = lambda * sigma;
        let x = if proportional { log_x.exp() } else { x_arith };

        // admissibility proxies on the current state
        let lam_bar = bundle.lam(z)[0];
        let ev = bundle.field_for_path(z).eval(t, x, lam_bar);
        let pi = strategy.pi(t, x, y, z)?;
        proxy_pi += (pi * sigma * ev.m_x).powi(2) * dt;
        proxy_d1 += (ev.r * ev.m_x).powi(2) * dt;

        // wealth
        if proportional {
            let p = strategy.fraction(t, x, y, z)?.expect("proportional");
            log_x += p * (mu * dt + sigma * dw) - 0.5 * p * p * sigma * sigma * dt;
        } else {
            let dx = pi * (mu * dt + sigma * dw);
            x_arith += dx;
            if x_arith <= 0.0 {
                violations += 1;
                x_arith = 1e-12;
            }
        }

        // fast factor
        if implicit_fast {
            y = (y + dt / eps * kappa * kappa_m + spec.a(y) / eps.sqrt() * dwy)
                / (1.0 + dt / eps * kappa);
        } else {
            y += spec.b(y) / eps * dt + spec.a(y) / eps.sqrt() * dwy;
        }
        // slow factor
        z += delta * spec.c(z) * dt + delta.sqrt() * spec.g(z) * dwz;

        if !(y.is_finite() && z.is_finite()) {
            return Err(CoreError::Simulation(format!(
                "factor state diverged on path {path} at step {step}"
            )));
        }
    }

    let terminal_wealth = if proportional { log_x.exp() } else { x_arith };
    Ok(PathOutcome {
        terminal_utility: bundle.utility.u(terminal_wealth),
        terminal_wealth,
        violations,
        proxy_pi,
        proxy_d1,
    })
}

/// Sample mean of `U(X_T)` with a 95% normal-approximation half-width.
/// Antithetic runs use pair means as the independent samples.
pub fn estimate_value(stats: &PathStats) -> Result<(f64, f64)> {
    let samples: Vec<f64> = if stats.antithetic {
        stats
            .terminal_utilities
            .chunks(2)
            .map(|p| 0.5 * (p[0] + p[1]))
            .collect()
    } else {
        stats.terminal_utilities.clone()
    };
    if samples.len() < 30 {
        return Err(CoreError::TooFewSamples(samples.len()));
    }
    let n = samples.len() as f64;
    let mean = pairwise_sum(&samples) / n;
    let sq: Vec<f64> = samples.iter().map(|u| (u - mean) * (u - mean)).collect();
    let var = pairwise_sum(&sq) / (n - 1.0);
    Ok((mean, 1.959964 * (var / n).sqrt()))
}
