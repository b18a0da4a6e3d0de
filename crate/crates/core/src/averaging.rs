//! Fast-factor ergodic machinery: invariant density, averaging, the centered
//! Poisson solver, and the theta coefficient family.
//!
//! The fast factor has generator `L_y = b(y) d/dy + (1/2) a(y)^2 d2/dy2` and
//! invariant density `phi(y) ~ exp(int 2b/a^2) / a^2`. Averages `<f>` are
//! taken against `phi`. Poisson equations
//!
//! ```text
//! L_y theta = f - <f>
//! ```
//!
//! are solved by variation of parameters in divergence form,
//!
//! ```text
//! theta'(y) = (2 / (a^2 phi)) * int_{-inf}^{y} (f - <f>) phi du,
//! ```
//!
//! then integrated and centered so that `<theta> = 0` (the additive constant
//! the equation leaves free). The second derivative is reconstructed from the
//! equation itself, `theta'' = (2/a^2)((f - <f>) - b theta')`, so the Poisson
//! residual at grid nodes is zero by construction and the only approximation
//! lives in the quadrature constants.
//!
//! All eleven auxiliary solutions `theta_1 .. theta_11` are chained solves
//! with right-hand sides built from `lambda`, `a`, and derivatives of earlier
//! thetas; the two that need cross `yz` derivatives are assembled on a
//! z-stencil of bundles.

use crate::error::{CoreError, Result};
use crate::model::ModelSpec;

// ---------------------------------------------------------------------------
// Gauss-Hermite quadrature
// ---------------------------------------------------------------------------

/// Nodes and weights for `int e^{-x^2} f(x) dx ~ sum w_i f(x_i)`.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1 && n <= 200, "gauss_hermite supports 1..=200 nodes");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = (n + 1) / 2;
    let mut z = 0.0_f64;
    for i in 0..m {
        // Classic initial guesses, largest root first.
        z = match i {
            0 => {
                let c = 2.0 * n as f64 + 1.0;
                c.sqrt() - 1.85575 * c.powf(-1.0 / 6.0)
            }
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * nodes[0],
            3 => 1.91 * z - 0.91 * nodes[1],
            _ => 2.0 * z - nodes[i - 2],
        };
        // Newton on the orthonormal Hermite recurrence.
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p0 = std::f64::consts::PI.powf(-0.25);
            let mut p1 = 0.0_f64;
            for k in 0..n {
                let p2 = p1;
                p1 = p0;
                p0 = z * (2.0 / (k as f64 + 1.0)).sqrt() * p1
                    - (k as f64 / (k as f64 + 1.0)).sqrt() * p2;
            }
            pp = (2.0 * n as f64).sqrt() * p1;
            let dz = p0 / pp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = z;
        nodes[n - 1 - i] = -z;
        weights[i] = 2.0 / (pp * pp);
        weights[n - 1 - i] = weights[i];
    }
    if n % 2 == 1 {
        nodes[m - 1] = 0.0;
    }
    (nodes, weights)
}

/// Average of `f` against a Gaussian `N(mean, sd^2)` by Gauss-Hermite.
pub fn gaussian_average<F: Fn(f64) -> f64>(f: F, mean: f64, sd: f64, n: usize) -> f64 {
    let (nodes, weights) = gauss_hermite(n);
    let c = std::f64::consts::PI.sqrt();
    let mut acc = 0.0;
    for (x, w) in nodes.iter().zip(&weights) {
        acc += w * f(mean + std::f64::consts::SQRT_2 * sd * x);
    }
    acc / c
}

// ---------------------------------------------------------------------------
// Invariant density on a dense grid
// ---------------------------------------------------------------------------

/// Uniform grid with composite-Simpson machinery.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub lo: f64,
    pub h: f64,
    /// Node count; odd so the interval count is even.
    pub n: usize,
}

impl Grid {
    pub fn at(&self, i: usize) -> f64 {
        self.lo + self.h * i as f64
    }

    pub fn hi(&self) -> f64 {
        self.at(self.n - 1)
    }

    pub fn nearest_index(&self, y: f64) -> usize {
        let i = ((y - self.lo) / self.h).round() as i64;
        i.clamp(0, self.n as i64 - 1) as usize
    }

    pub fn points(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n).map(|i| self.at(i))
    }
}

/// Normalized invariant density of the fast factor, tabulated on a grid.
#[derive(Debug, Clone)]
pub struct InvariantDensity {
    pub grid: Grid,
    /// Normalized density values at the nodes.
    pub phi: Vec<f64>,
}

/// Nodal first derivatives by fourth-order stencils (one-sided at the ends).
fn nodal_derivatives(vals: &[f64], h: f64) -> Vec<f64> {
    let n = vals.len();
    let mut d = vec![0.0; n];
    let c = 1.0 / (12.0 * h);
    for i in 2..n - 2 {
        d[i] = (vals[i - 2] - 8.0 * vals[i - 1] + 8.0 * vals[i + 1] - vals[i + 2]) * c;
    }
    let fw = |k: usize| -> f64 {
        (-25.0 * vals[k] + 48.0 * vals[k + 1] - 36.0 * vals[k + 2] + 16.0 * vals[k + 3]
            - 3.0 * vals[k + 4])
            * c
    };
    let bw = |k: usize| -> f64 {
        (25.0 * vals[k] - 48.0 * vals[k - 1] + 36.0 * vals[k - 2] - 16.0 * vals[k - 3]
            + 3.0 * vals[k - 4])
            * c
    };
    d[0] = fw(0);
    d[1] = fw(1);
    d[n - 2] = bw(n - 2);
    d[n - 1] = bw(n - 1);
    d
}

/// Build the invariant density for the model's fast factor, doubling the
/// node count until the second-moment probe stabilizes.
pub fn invariant_density(spec: &ModelSpec) -> Result<InvariantDensity> {
    let (ylo, yhi) = spec.y_domain();
    let mut n = 1601;
    let mut prev_probe = f64::NAN;
    loop {
        let d = build_density(spec, ylo, yhi, n)?;
        let probe = d.average_fn(|y| y * y);
        if !probe.is_finite() {
            return Err(CoreError::QuadratureFailure(
                "invariant density second moment is not finite".into(),
            ));
        }
        if prev_probe.is_finite() && (probe - prev_probe).abs() <= 1e-10 * (1.0 + probe.abs()) {
            return Ok(d);
        }
        prev_probe = probe;
        if n >= 12801 {
            return Ok(d);
        }
        n = 2 * (n - 1) + 1;
    }
}

fn build_density(spec: &ModelSpec, ylo: f64, yhi: f64, n: usize) -> Result<InvariantDensity> {
    let h = (yhi - ylo) / (n - 1) as f64;
    let grid = Grid { lo: ylo, h, n };
    // log phi_unnorm(y) = int_{ylo}^{y} 2 b/a^2 - log a^2; integrate the
    // exponent cumulatively, then normalize.
    let mut exponent = vec![0.0; n];
    let f = |y: f64| 2.0 * spec.b(y) / (spec.a(y) * spec.a(y));
    let vals: Vec<f64> = grid.points().map(f).collect();
    cumulative_integral(&vals, h, &mut exponent);
    let mut log_phi: Vec<f64> = (0..n)
        .map(|i| exponent[i] - (spec.a(grid.at(i)).powi(2)).ln())
        .collect();
    let max_lp = log_phi.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for v in &mut log_phi {
        *v -= max_lp;
    }
    let mut phi: Vec<f64> = log_phi.iter().map(|&v| v.exp()).collect();
    let mass = quad_total(&phi, h);
    if !(mass.is_finite() && mass > 0.0) {
        return Err(CoreError::QuadratureFailure("density mass did not converge".into()));
    }
    for p in &mut phi {
        *p /= mass;
    }
    Ok(InvariantDensity { grid, phi })
}

/// Cumulative integral by Euler-Maclaurin-corrected trapezoid:
/// `C[i] = T[i] - h^2/12 (f'_i - f'_0)`, fourth order with an error profile
/// that is smooth in the node index (so downstream finite differences of the
/// result stay clean). The final entry is the quadrature total used by the
/// averaging rule, so centered integrands accumulate back to ~zero.
fn cumulative_integral(vals: &[f64], h: f64, out: &mut [f64]) {
    let n = vals.len();
    let d = nodal_derivatives(vals, h);
    out[0] = 0.0;
    let mut trap = 0.0;
    for i in 1..n {
        trap += 0.5 * h * (vals[i - 1] + vals[i]);
        out[i] = trap - h * h / 12.0 * (d[i] - d[0]);
    }
}

/// Quadrature total consistent with [`cumulative_integral`].
fn quad_total(vals: &[f64], h: f64) -> f64 {
    let n = vals.len();
    let d = nodal_derivatives(vals, h);
    let mut trap = 0.0;
    for i in 1..n {
        trap += 0.5 * h * (vals[i - 1] + vals[i]);
    }
    trap - h * h / 12.0 * (d[n - 1] - d[0])
}

impl InvariantDensity {
    /// `<f>` over the grid.
    pub fn average_fn<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        let vals: Vec<f64> =
            (0..self.grid.n).map(|i| self.phi[i] * f(self.grid.at(i))).collect();
        quad_total(&vals, self.grid.h)
    }

    /// `<f>` from nodal values.
    pub fn average_values(&self, vals: &[f64]) -> f64 {
        debug_assert_eq!(vals.len(), self.grid.n);
        let weighted: Vec<f64> =
            (0..self.grid.n).map(|i| self.phi[i] * vals[i]).collect();
        quad_total(&weighted, self.grid.h)
    }

    /// Adjoint check `<L_y f> = 0` for a smooth test function with
    /// analytic derivatives.
    pub fn adjoint_residual<F, F1, F2>(&self, spec: &ModelSpec, f: F, f1: F1, f2: F2) -> f64
    where
        F: Fn(f64) -> f64,
        F1: Fn(f64) -> f64,
        F2: Fn(f64) -> f64,
    {
        let _ = f;
        self.average_fn(|y| spec.b(y) * f1(y) + 0.5 * spec.a(y) * spec.a(y) * f2(y))
    }
}

// ---------------------------------------------------------------------------
// Poisson solver
// ---------------------------------------------------------------------------

/// Centered solution of `L_y theta = rhs - <rhs>` on the density grid.
#[derive(Debug, Clone)]
pub struct PoissonSolution {
    pub theta: Vec<f64>,
    pub theta_y: Vec<f64>,
    /// Centered right-hand side at the nodes (`rhs - <rhs>`).
    pub fluct: Vec<f64>,
    /// The subtracted average `<rhs>` (the solvability constant).
    pub rhs_avg: f64,
}

impl PoissonSolution {
    pub fn zero(n: usize, rhs_avg: f64) -> Self {
        PoissonSolution {
            theta: vec![0.0; n],
            theta_y: vec![0.0; n],
            fluct: vec![0.0; n],
            rhs_avg,
        }
    }

    /// `theta''` reconstructed from the equation.
    pub fn theta_yy(&self, spec: &ModelSpec, grid: &Grid, i: usize) -> f64 {
        let y = grid.at(i);
        let a2 = spec.a(y) * spec.a(y);
        2.0 / a2 * (self.fluct[i] - spec.b(y) * self.theta_y[i])
    }
}

/// Solve the centered Poisson equation from nodal right-hand-side values.
///
/// When the centered right-hand side is零 at quadrature resolution the
/// solution snaps to exactly zero, so constant-Sharpe models collapse all
/// correctors identically.
pub fn solve_poisson(density: &InvariantDensity, rhs: &[f64], spec: &ModelSpec) -> Result<PoissonSolution> {
    let n = density.grid.n;
    if rhs.len() != n {
        return Err(CoreError::PoissonFailure("rhs length mismatch".into()));
    }
    if rhs.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::PoissonFailure("rhs not finite on the grid".into()));
    }
    let avg = density.average_values(rhs);
    let fluct: Vec<f64> = rhs.iter().map(|&v| v - avg).collect();

    let scale = rhs.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let fmax = fluct.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if fmax <= 64.0 * f64::EPSILON * scale.max(1e-300) {
        return Ok(PoissonSolution::zero(n, avg));
    }

    // S(y) = int_{lo}^{y} fluct * phi
    let integrand: Vec<f64> = (0..n).map(|i| fluct[i] * density.phi[i]).collect();
    let mut s = vec![0.0; n];
    cumulative_integral(&integrand, density.grid.h, &mut s);

    let mut theta_y = vec![0.0; n];
    for i in 0..n {
        let y = density.grid.at(i);
        let a2 = spec.a(y) * spec.a(y);
        let denom = a2 * density.phi[i];
        theta_y[i] = if denom > 1e-280 { 2.0 * s[i] / denom } else { 0.0 };
    }

    let mut theta = vec![0.0; n];
    cumulative_integral(&theta_y, density.grid.h, &mut theta);
    let mean = density.average_values(&theta);
    for v in &mut theta {
        *v -= mean;
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::PoissonFailure("solution blow-up at truncation boundary".into()));
    }
    Ok(PoissonSolution { theta, theta_y, fluct, rhs_avg: avg })
}

// ---------------------------------------------------------------------------
// Theta family
// ---------------------------------------------------------------------------

/// Identifiers for the Poisson family. `T0` is the primary `theta` driven by
/// the squared Sharpe fluctuation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThetaId {
    T0,
    T1,
    T2,
    T3,
    T4,
    T5,
    T6,
    T7,
    T8,
    T9,
    T10,
    T11,
}

pub const THETA_COUNT: usize = 12;

impl ThetaId {
    pub fn index(self) -> usize {
        match self {
            ThetaId::T0 => 0,
            ThetaId::T1 => 1,
            ThetaId::T2 => 2,
            ThetaId::T3 => 3,
            ThetaId::T4 => 4,
            ThetaId::T5 => 5,
            ThetaId::T6 => 6,
            ThetaId::T7 => 7,
            ThetaId::T8 => 8,
            ThetaId::T9 => 9,
            ThetaId::T10 => 10,
            ThetaId::T11 => 11,
        }
    }
}

/// Fast-factor averaging outputs for a fixed slow-factor level z.
#[derive(Debug, Clone)]
pub struct ThetaBundle {
    pub z: f64,
    pub grid: Grid,
    pub lam_bar: f64,
    pub lam_hat: f64,
    /// `B = <lambda a theta_y>`.
    pub b_coef: f64,
    /// `B1 = <a lambda theta1_y>`.
    pub b1_coef: f64,
    /// `<theta lambda^2>`, `<a^2 theta_y^2>`, `<a lambda theta2_y>`,
    /// `<theta_y>`, `<a theta_y>` — the solvability constants of the
    /// corresponding solves.
    pub avg_theta_lam2: f64,
    pub avg_a2_ty2: f64,
    pub avg_a_lam_t2y: f64,
    pub avg_ty: f64,
    pub avg_a_ty: f64,
    /// `<theta_yz>` and `<a theta_yz>`; zero until the stencil pass fills
    /// the cross-derivative solves.
    pub avg_tyz: f64,
    pub avg_a_tyz: f64,
    solutions: Vec<PoissonSolution>,
}

impl ThetaBundle {
    pub fn theta(&self, id: ThetaId, i: usize) -> f64 {
        self.solutions[id.index()].theta[i]
    }

    pub fn theta_y(&self, id: ThetaId, i: usize) -> f64 {
        self.solutions[id.index()].theta_y[i]
    }

    pub fn theta_yy(&self, spec: &ModelSpec, id: ThetaId, i: usize) -> f64 {
        self.solutions[id.index()].theta_yy(spec, &self.grid, i)
    }

    pub fn solution(&self, id: ThetaId) -> &PoissonSolution {
        &self.solutions[id.index()]
    }

    /// Hermite interpolation of `theta` between grid nodes.
    pub fn theta_at(&self, id: ThetaId, y: f64) -> f64 {
        let s = &self.solutions[id.index()];
        hermite_eval(&self.grid, &s.theta, &s.theta_y, y)
    }

    /// Dump the `(y, theta_0 .. theta_11)` curves as CSV for inspection.
    pub fn dump_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut out = String::from(
            "y,theta,theta1,theta2,theta3,theta4,theta5,theta6,theta7,theta8,theta9,theta10,theta11\n",
        );
        for i in (0..self.grid.n).step_by(8) {
            out.push_str(&format!("{}", self.grid.at(i)));
            for s in &self.solutions {
                out.push_str(&format!(",{}", s.theta[i]));
            }
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

fn hermite_eval(grid: &Grid, v: &[f64], dv: &[f64], y: f64) -> f64 {
    let pos = ((y - grid.lo) / grid.h).clamp(0.0, (grid.n - 1) as f64);
    let i = (pos.floor() as usize).min(grid.n - 2);
    let t = pos - i as f64;
    let h = grid.h;
    let h00 = (1.0 + 2.0 * t) * (1.0 - t) * (1.0 - t);
    let h10 = t * (1.0 - t) * (1.0 - t);
    let h01 = t * t * (3.0 - 2.0 * t);
    let h11 = t * t * (t - 1.0);
    h00 * v[i] + h10 * h * dv[i] + h01 * v[i + 1] + h11 * h * dv[i + 1]
}

/// Build the theta family at a fixed z (everything except the two solves
/// that need yz cross derivatives, which [`BundleStack`] fills).
pub fn theta_family(spec: &ModelSpec, density: &InvariantDensity, z: f64) -> Result<ThetaBundle> {
    let grid = density.grid.clone();
    let n = grid.n;
    let lam: Vec<f64> = grid.points().map(|y| spec.lambda(y, z)).collect();
    let a: Vec<f64> = grid.points().map(|y| spec.a(y)).collect();

    let lam2: Vec<f64> = lam.iter().map(|l| l * l).collect();
    let lam_bar2 = density.average_values(&lam2);
    let lam_hat = density.average_values(&lam);
    if lam_bar2 < 0.0 {
        return Err(CoreError::PoissonFailure("square-averaged Sharpe ratio not finite".into()));
    }
    // Degenerate lam = 0 is allowed for trivial-collapse checks; the
    // bounded-away-from-zero assumption is asserted by the property suite.
    let lam_bar = lam_bar2.sqrt();

    // theta: L_y theta = lambda^2 - lam_bar^2
    let t0 = solve_poisson(density, &lam2, spec)?;

    // theta2: L_y theta2 = lambda - lam_hat
    let t2 = solve_poisson(density, &lam, spec)?;

    // theta1: L_y theta1 = lambda a theta_y - B
    let rhs1: Vec<f64> = (0..n).map(|i| lam[i] * a[i] * t0.theta_y[i]).collect();
    let t1 = solve_poisson(density, &rhs1, spec)?;
    let b_coef = t1.rhs_avg;

    // theta3: L_y theta3 = a lambda theta1_y - B1
    let rhs3: Vec<f64> = (0..n).map(|i| a[i] * lam[i] * t1.theta_y[i]).collect();
    let t3 = solve_poisson(density, &rhs3, spec)?;
    let b1_coef = t3.rhs_avg;

    // theta4: L_y theta4 = theta lambda^2 - <theta lambda^2>
    let rhs4: Vec<f64> = (0..n).map(|i| t0.theta[i] * lam2[i]).collect();
    let t4 = solve_poisson(density, &rhs4, spec)?;
    let avg_theta_lam2 = t4.rhs_avg;

    // theta5: L_y theta5 = theta - <theta> (= theta; already centered)
    let t5 = solve_poisson(density, &t0.theta.clone(), spec)?;

    // theta7: L_y theta7 = theta_y - <theta_y>
    let t7 = solve_poisson(density, &t0.theta_y.clone(), spec)?;
    let avg_ty = t7.rhs_avg;

    // theta8: L_y theta8 = a lambda theta2_y - <a lambda theta2_y>
    let rhs8: Vec<f64> = (0..n).map(|i| a[i] * lam[i] * t2.theta_y[i]).collect();
    let t8 = solve_poisson(density, &rhs8, spec)?;
    let avg_a_lam_t2y = t8.rhs_avg;

    // theta9: L_y theta9 = a^2 theta_y^2 - <a^2 theta_y^2>
    let rhs9: Vec<f64> = (0..n).map(|i| a[i] * a[i] * t0.theta_y[i] * t0.theta_y[i]).collect();
    let t9 = solve_poisson(density, &rhs9, spec)?;
    let avg_a2_ty2 = t9.rhs_avg;

    // theta11: L_y theta11 = a theta_y - <a theta_y>
    let rhs11: Vec<f64> = (0..n).map(|i| a[i] * t0.theta_y[i]).collect();
    let t11 = solve_poisson(density, &rhs11, spec)?;
    let avg_a_ty = t11.rhs_avg;

    // theta6 / theta10 need theta_yz; placeholder zeros until the stack pass.
    let t6 = PoissonSolution::zero(n, 0.0);
    let t10 = PoissonSolution::zero(n, 0.0);

    Ok(ThetaBundle {
        z,
        grid,
        lam_bar,
        lam_hat,
        b_coef,
        b1_coef,
        avg_theta_lam2,
        avg_a2_ty2,
        avg_a_lam_t2y,
        avg_ty,
        avg_a_ty,
        avg_tyz: 0.0,
        avg_a_tyz: 0.0,
        solutions: vec![t0, t1, t2, t3, t4, t5, t6, t7, t8, t9, t10, t11],
    })
}

// ---------------------------------------------------------------------------
// Stacks over a z-stencil
// ---------------------------------------------------------------------------

/// Central-difference coefficients over a 5-point stencil.
fn stencil_d1(vals: [f64; 5], h: f64) -> f64 {
    (vals[0] - 8.0 * vals[1] + 8.0 * vals[3] - vals[4]) / (12.0 * h)
}

fn stencil_d2(vals: [f64; 5], h: f64) -> f64 {
    (-vals[0] + 16.0 * vals[1] - 30.0 * vals[2] + 16.0 * vals[3] - vals[4]) / (12.0 * h * h)
}

/// Bundles on a 9-point z-stencil around a центральный z, exposing z- and
/// yz-derivatives of every theta. For models whose Sharpe ratio does not
/// depend on z the stencil collapses to a single bundle and all
/// z-derivatives are exactly zero.
#[derive(Debug, Clone)]
pub struct BundleStack {
    pub z: f64,
    pub h_z: f64,
    /// index 4 is the center; None for z-independent models.
    bundles: Vec<ThetaBundle>,
    z_dependent: bool,
}

pub const STACK_STEP: f64 = 1e-3;

impl BundleStack {
    pub fn build(spec: &ModelSpec, density: &InvariantDensity, z: f64) -> Result<Self> {
        let z_dependent = !spec.lambda_z_independent();
        if !z_dependent {
            let mut center = theta_family(spec, density, z)?;
            // theta6 / theta10 have identically zero rhs here.
            let n = center.grid.n;
            center.solutions[ThetaId::T6.index()] = PoissonSolution::zero(n, 0.0);
            center.solutions[ThetaId::T10.index()] = PoissonSolution::zero(n, 0.0);
            return Ok(BundleStack { z, h_z: STACK_STEP, bundles: vec![center], z_dependent });
        }

        let h = STACK_STEP;
        let mut bundles = Vec::with_capacity(9);
        for m in -4..=4 {
            bundles.push(theta_family(spec, density, z + h * m as f64)?);
        }
        // theta_yz at stencil offsets -2..=2 via 5-point differences of
        // theta_y; then solve theta6/theta10 at those offsets.
        let n = density.grid.n;
        for m in 2..=6usize {
            let mut tyz = vec![0.0; n];
            for i in 0..n {
                let vals = [
                    bundles[m - 2].solutions[0].theta_y[i],
                    bundles[m - 1].solutions[0].theta_y[i],
                    bundles[m].solutions[0].theta_y[i],
                    bundles[m + 1].solutions[0].theta_y[i],
                    bundles[m + 2].solutions[0].theta_y[i],
                ];
                tyz[i] = stencil_d1(vals, h);
            }
            let t6 = solve_poisson(density, &tyz, spec)?;
            let a_tyz: Vec<f64> =
                (0..n).map(|i| spec.a(density.grid.at(i)) * tyz[i]).collect();
            let t10 = solve_poisson(density, &a_tyz, spec)?;
            bundles[m].avg_tyz = t6.rhs_avg;
            bundles[m].avg_a_tyz = t10.rhs_avg;
            bundles[m].solutions[ThetaId::T6.index()] = t6;
            bundles[m].solutions[ThetaId::T10.index()] = t10;
        }
        Ok(BundleStack { z, h_z: h, bundles, z_dependent })
    }

    pub fn center(&self) -> &ThetaBundle {
        if self.z_dependent {
            &self.bundles[4]
        } else {
            &self.bundles[0]
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.center().grid
    }

    fn five(&self, id: ThetaId, i: usize, deriv_y: bool) -> [f64; 5] {
        let mut out = [0.0; 5];
        for (k, m) in (2..=6usize).enumerate() {
            let b = &self.bundles[m];
            out[k] =
                if deriv_y { b.solutions[id.index()].theta_y[i] } else { b.solutions[id.index()].theta[i] };
        }
        out
    }

    /// Scalar functional of the bundle with three z-derivatives
    /// (five/seven-point stencils over the stack; zero for z-independent
    /// models).
    pub fn z_scalar<F: Fn(&ThetaBundle) -> f64>(&self, f: F) -> [f64; 4] {
        if !self.z_dependent {
            return [f(self.center()), 0.0, 0.0, 0.0];
        }
        let v: Vec<f64> = self.bundles.iter().map(&f).collect();
        let h = self.h_z;
        let d1 = stencil_d1([v[2], v[3], v[4], v[5], v[6]], h);
        let d2 = stencil_d2([v[2], v[3], v[4], v[5], v[6]], h);
        let d3 = (-v[1] + 8.0 * v[2] - 13.0 * v[3] + 13.0 * v[5] - 8.0 * v[6] + v[7])
            / (8.0 * h * h * h);
        [v[4], d1, d2, d3]
    }

    /// theta value plus the derivative set the corrector machinery needs:
    /// (v, d/dy, d2/dy2, d/dz, d2/dz2, d2/dydz).
    pub fn theta_full(&self, spec: &ModelSpec, id: ThetaId, i: usize) -> ThetaEval {
        let c = self.center();
        let v = c.theta(id, i);
        let dy = c.theta_y(id, i);
        let dyy = c.theta_yy(spec, id, i);
        if !self.z_dependent {
            return ThetaEval { v, dy, dyy, dz: 0.0, dzz: 0.0, dyz: 0.0 };
        }
        let vals = self.five(id, i, false);
        let dvals = self.five(id, i, true);
        ThetaEval {
            v,
            dy,
            dyy,
            dz: stencil_d1(vals, self.h_z),
            dzz: stencil_d2(vals, self.h_z),
            dyz: stencil_d1(dvals, self.h_z),
        }
    }
}

/// Point evaluation of a theta with its partials.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ThetaEval {
    pub v: f64,
    pub dy: f64,
    pub dyy: f64,
    pub dz: f64,
    pub dzz: f64,
    pub dyz: f64,
}

// ---------------------------------------------------------------------------
// Analytic averaged Sharpe curves
// ---------------------------------------------------------------------------

/// `lam_bar(z)`, `lam_hat(z)` and their z-derivatives up to fourth order for
/// the analytic catalog (tanh-separable Sharpe families).
#[derive(Debug, Clone)]
pub struct SharpeCurves {
    lambda0: f64,
    lambda_y: f64,
    lambda_z: f64,
    /// `<tanh y>` and `<tanh^2 y>` under the fast invariant law.
    m1: f64,
    m2: f64,
}

impl SharpeCurves {
    pub fn build(spec: &ModelSpec, density: &InvariantDensity) -> Self {
        use crate::model::Catalog;
        let (lambda0, lambda_y, lambda_z) = match spec.catalog {
            Catalog::TanhSharpe { lambda0, lambda_y, lambda_z, .. } => (lambda0, lambda_y, lambda_z),
            Catalog::Constant { mu0, sigma0, .. } => (mu0 / sigma0, 0.0, 0.0),
            Catalog::AffineY { lambda0, .. } => (lambda0, 0.0, 0.0),
        };
        let m1 = if lambda_y == 0.0 { 0.0 } else { density.average_fn(|y| y.tanh()) };
        let m2 = if lambda_y == 0.0 { 0.0 } else { density.average_fn(|y| y.tanh().powi(2)) };
        SharpeCurves { lambda0, lambda_y, lambda_z, m1, m2 }
    }

    /// f(z) = lambda0 + lambda_z tanh z with four derivatives.
    fn f(&self, z: f64) -> [f64; 5] {
        if self.lambda_z == 0.0 {
            return [self.lambda0, 0.0, 0.0, 0.0, 0.0];
        }
        let t = z.tanh();
        let u = 1.0 - t * t; // sech^2
        [
            self.lambda0 + self.lambda_z * t,
            self.lambda_z * u,
            self.lambda_z * (-2.0 * t * u),
            self.lambda_z * (4.0 * t * t * u - 2.0 * u * u),
            self.lambda_z * (16.0 * t * u * u - 8.0 * t * t * t * u),
        ]
    }

    /// `lam_hat(z)` and derivatives.
    pub fn lam_hat(&self, z: f64) -> [f64; 5] {
        let mut f = self.f(z);
        f[0] += self.lambda_y * self.m1;
        f
    }

    /// `lam_bar(z) = sqrt(<lambda^2>)` and derivatives.
    pub fn lam_bar(&self, z: f64) -> [f64; 5] {
        let f = self.f(z);
        let hat = self.lam_hat(z);
        // A = f^2 + 2 f lambda_y m1 + lambda_y^2 m2
        let a0 = f[0] * f[0] + 2.0 * f[0] * self.lambda_y * self.m1 + self.lambda_y * self.lambda_y * self.m2;
        let a1 = 2.0 * f[1] * hat[0];
        let a2 = 2.0 * f[2] * hat[0] + 2.0 * f[1] * f[1];
        let a3 = 2.0 * f[3] * hat[0] + 6.0 * f[1] * f[2];
        let a4 = 2.0 * f[4] * hat[0] + 8.0 * f[1] * f[3] + 6.0 * f[2] * f[2];
        let l = a0.sqrt();
        let l1 = a1 / (2.0 * l);
        let l2 = (a2 - 2.0 * l1 * l1) / (2.0 * l);
        let l3 = (a3 - 6.0 * l1 * l2) / (2.0 * l);
        let l4 = (a4 - 8.0 * l1 * l3 - 6.0 * l2 * l2) / (2.0 * l);
        [l, l1, l2, l3, l4]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{default_tanh_model, Catalog, ModelConfig};

    fn ou_model() -> ModelSpec {
        default_tanh_model(0.04, 0.01)
    }

    fn constant_model() -> ModelSpec {
        let config = ModelConfig {
            catalog: Catalog::Constant {
                mu0: 0.25,
                sigma0: 0.5,
                kappa_y: 1.0,
                m_y: 0.0,
                a0: std::f64::consts::SQRT_2,
                kappa_z: 1.0,
                m_z: 0.0,
                g0: 1.0,
            },
            rho1: 0.0,
            rho2: 0.0,
            rho12: 0.0,
            eps: 0.04,
            delta: 0.01,
            horizon_t: 1.0,
            domain_halfwidth_sds: 8.0,
        };
        crate::model::instantiate_model(&config).unwrap()
    }

    #[test]
    fn gauss_hermite_moments() {
        for &n in &[8usize, 16, 32, 64] {
            let (x, w) = gauss_hermite(n);
            let total: f64 = w.iter().sum();
            assert!((total - std::f64::consts::PI.sqrt()).abs() < 1e-12, "mass at n={n}");
            let m2: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * xi * xi).sum();
            assert!((m2 - std::f64::consts::PI.sqrt() / 2.0).abs() < 1e-11, "x^2 at n={n}");
        }
        // <y^2> = 1 under N(0,1)
        let v = gaussian_average(|y| y * y, 0.0, 1.0, 40);
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invariant_density_is_standard_normal_for_ou() {
        // b = kappa(m - y) with kappa=1, m=0, a = sqrt(2) -> N(0, 1)
        let spec = ou_model();
        let d = invariant_density(&spec).unwrap();
        let idx = d.grid.nearest_index(0.0);
        let expect = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        assert!((d.phi[idx] - expect).abs() < 1e-8);
        assert!((d.average_fn(|_| 1.0) - 1.0).abs() < 1e-12);
        assert!(d.average_fn(|y| y.tanh()).abs() < 1e-11);
        assert!((d.average_fn(|y| y * y) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn invariant_density_mean_matches_m() {
        let config = ModelConfig {
            catalog: Catalog::TanhSharpe {
                lambda0: 0.3,
                lambda_y: 0.1,
                lambda_z: 0.0,
                sigma0: 0.5,
                kappa_y: 2.0,
                m_y: 0.7,
                a0: 1.0,
                kappa_z: 1.0,
                m_z: 0.0,
                g0: 1.0,
            },
            rho1: 0.0,
            rho2: 0.0,
            rho12: 0.0,
            eps: 0.04,
            delta: 0.01,
            horizon_t: 1.0,
            domain_halfwidth_sds: 8.0,
        };
        let spec = crate::model::instantiate_model(&config).unwrap();
        let d = invariant_density(&spec).unwrap();
        assert!((d.average_fn(|y| y) - 0.7).abs() < 1e-9);
        // variance a^2/(2 kappa) = 0.25
        assert!((d.average_fn(|y| (y - 0.7) * (y - 0.7)) - 0.25).abs() < 1e-9);
    }

    #[test]
    fn adjoint_annihilates_test_function() {
        let spec = ou_model();
        let d = invariant_density(&spec).unwrap();
        let r = d.adjoint_residual(
            &spec,
            |y| (-y * y / 3.0).exp(),
            |y| -2.0 * y / 3.0 * (-y * y / 3.0).exp(),
            |y| (4.0 * y * y / 9.0 - 2.0 / 3.0) * (-y * y / 3.0).exp(),
        );
        assert!(r.abs() < 1e-10, "adjoint residual {r}");
    }

    #[test]
    fn poisson_linear_rhs() {
        // OU(0, sqrt2): rhs = y -> theta = -y
        let spec = ou_model();
        let d = invariant_density(&spec).unwrap();
        let rhs: Vec<f64> = d.grid.points().collect();
        let sol = solve_poisson(&d, &rhs, &spec).unwrap();
        let i = d.grid.nearest_index(0.8);
        assert!((sol.theta[i] - (-d.grid.at(i))).abs() < 1e-8);
        assert!((sol.theta_y[i] + 1.0).abs() < 1e-8);
        assert!(sol.rhs_avg.abs() < 1e-12);
        // centered
        assert!(d.average_values(&sol.theta).abs() < 1e-12);
    }

    #[test]
    fn poisson_quadratic_rhs() {
        // rhs = y^2 - 1 -> theta = -y^2/2 + 1/2
        let spec = ou_model();
        let d = invariant_density(&spec).unwrap();
        let rhs: Vec<f64> = d.grid.points().map(|y| y * y - 1.0).collect();
        let sol = solve_poisson(&d, &rhs, &spec).unwrap();
        for &yq in &[-1.5, 0.0, 0.5, 2.0] {
            let i = d.grid.nearest_index(yq);
            let y = d.grid.at(i);
            assert!(
                (sol.theta[i] - (0.5 - y * y / 2.0)).abs() < 1e-7,
                "theta({y}) = {}",
                sol.theta[i]
            );
        }
    }

    #[test]
    fn poisson_constant_rhs_snaps_to_zero() {
        let spec = ou_model();
        let d = invariant_density(&spec).unwrap();
        let rhs = vec![3.25; d.grid.n];
        let sol = solve_poisson(&d, &rhs, &spec).unwrap();
        assert!(sol.theta.iter().all(|&v| v == 0.0));
        assert!((sol.rhs_avg - 3.25).abs() < 1e-12);
    }

    #[test]
    fn poisson_residual_at_nodes() {
        // L_y theta = fluct holds exactly by construction; check with
        // finite-difference второй derivative as an independent route.
        let spec = ou_model();
        let d = invariant_density(&spec).unwrap();
        let rhs: Vec<f64> = d.grid.points().map(|y| (0.3 + 0.2 * y.tanh()).powi(2)).collect();
        let sol = solve_poisson(&d, &rhs, &spec).unwrap();
        let h = d.grid.h;
        for &yq in &[-2.0, -0.3, 0.0, 1.1, 3.0] {
            let i = d.grid.nearest_index(yq);
            let y = d.grid.at(i);
            let t = &sol.theta;
            let dyy_fd = (-t[i - 2] + 16.0 * t[i - 1] - 30.0 * t[i] + 16.0 * t[i + 1] - t[i + 2])
                / (12.0 * h * h);
            let lres = spec.b(y) * sol.theta_y[i] + 0.5 * spec.a(y).powi(2) * dyy_fd - sol.fluct[i];
            assert!(lres.abs() < 1e-8, "residual {lres} at y={y}");
            // consistency of stored dy against FD of theta
            let dy_fd = (t[i - 2] - 8.0 * t[i - 1] + 8.0 * t[i + 1] - t[i + 2]) / (12.0 * h);
            assert!((dy_fd - sol.theta_y[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn theta_family_constant_lambda_all_zero() {
        let spec = constant_model();
        let d = invariant_density(&spec).unwrap();
        let b = theta_family(&spec, &d, 0.0).unwrap();
        assert_eq!(b.theta(ThetaId::T0, d.grid.n / 2), 0.0);
        assert_eq!(b.b_coef, 0.0);
        assert_eq!(b.b1_coef, 0.0);
        assert_eq!(b.theta(ThetaId::T1, 10), 0.0);
        assert!((b.lam_bar - 0.5).abs() < 1e-12);
        assert!((b.lam_hat - 0.5).abs() < 1e-12);
    }

    #[test]
    fn theta_family_tanh_lambda() {
        let spec = ou_model();
        let d = invariant_density(&spec).unwrap();
        let b = theta_family(&spec, &d, 0.0).unwrap();
        // lam_hat = 0.3 by symmetry; lam_bar^2 = 0.09 + 0.04 <tanh^2>
        assert!((b.lam_hat - 0.3).abs() < 1e-10);
        let m2 = d.average_fn(|y| y.tanh().powi(2));
        assert!((b.lam_bar * b.lam_bar - (0.09 + 0.04 * m2)).abs() < 1e-12);
        assert!(b.lam_bar > 0.01, "lam_bar bounded away from zero");
        // self-consistency: <L_y theta_i> = 0 via the stored fluct
        for id in [ThetaId::T0, ThetaId::T1, ThetaId::T2, ThetaId::T4, ThetaId::T9] {
            let avg = d.average_values(&b.solution(id).fluct);
            assert!(avg.abs() < 1e-12, "solvability residual for {id:?}: {avg}");
        }
        // B two routes: quadrature of lam*a*theta_y vs FD-theta route
        let n = d.grid.n;
        let mut route2 = vec![0.0; n];
        for i in 2..n - 2 {
            let y = d.grid.at(i);
            let t = |k: usize| b.theta(ThetaId::T0, k);
            let dy_fd =
                (t(i - 2) - 8.0 * t(i - 1) + 8.0 * t(i + 1) - t(i + 2)) / (12.0 * d.grid.h);
            route2[i] = spec.lambda(y, 0.0) * spec.a(y) * dy_fd;
        }
        let b_route2 = d.average_values(&route2);
        assert!(
            (b.b_coef - b_route2).abs() < 1e-6 * b.b_coef.abs().max(1e-3),
            "B routes disagree: {} vs {}",
            b.b_coef,
            b_route2
        );
        // theta5 solves L_y theta5 = theta (already centered)
        let t5 = b.solution(ThetaId::T5);
        let t0 = b.solution(ThetaId::T0);
        for i in (0..n).step_by(n / 7) {
            assert!((t5.fluct[i] - t0.theta[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn bundle_stack_z_independent_has_zero_z_derivs() {
        let spec = ou_model();
        let d = invariant_density(&spec).unwrap();
        let stack = BundleStack::build(&spec, &d, 0.0).unwrap();
        let i = d.grid.nearest_index(0.7);
        let e = stack.theta_full(&spec, ThetaId::T0, i);
        assert_eq!(e.dz, 0.0);
        assert_eq!(e.dyz, 0.0);
        assert_eq!(stack.center().theta(ThetaId::T6, i), 0.0);
        assert_eq!(stack.center().theta(ThetaId::T10, i), 0.0);
    }

    #[test]
    fn bundle_stack_z_dependent_derivatives() {
        let config = ModelConfig {
            catalog: Catalog::TanhSharpe {
                lambda0: 0.3,
                lambda_y: 0.2,
                lambda_z: 0.1,
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
            rho12: 0.1,
            eps: 0.04,
            delta: 0.01,
            horizon_t: 1.0,
            domain_halfwidth_sds: 8.0,
        };
        let spec = crate::model::instantiate_model(&config).unwrap();
        let d = invariant_density(&spec).unwrap();
        let stack = BundleStack::build(&spec, &d, 0.2).unwrap();
        let i = d.grid.nearest_index(0.5);
        let e = stack.theta_full(&spec, ThetaId::T0, i);
        assert!(e.dz.abs() > 1e-6, "theta_z should be nonzero, got {}", e.dz);
        // theta10 rhs average consistent with a * <theta_yz> for constant a
        let c = stack.center();
        assert!(
            (c.avg_a_tyz - spec.a(0.0) * c.avg_tyz).abs() < 1e-9,
            "constant-a relation between <a theta_yz> and <theta_yz>"
        );
    }

    #[test]
    fn sharpe_curves_match_quadrature() {
        let config = ModelConfig {
            catalog: Catalog::TanhSharpe {
                lambda0: 0.3,
                lambda_y: 0.2,
                lambda_z: 0.1,
                sigma0: 0.5,
                kappa_y: 1.0,
                m_y: 0.3,
                a0: std::f64::consts::SQRT_2,
                kappa_z: 1.0,
                m_z: 0.0,
                g0: 1.0,
            },
            rho1: 0.0,
            rho2: 0.0,
            rho12: 0.0,
            eps: 0.04,
            delta: 0.01,
            horizon_t: 1.0,
            domain_halfwidth_sds: 8.0,
        };
        let spec = crate::model::instantiate_model(&config).unwrap();
        let d = invariant_density(&spec).unwrap();
        let curves = SharpeCurves::build(&spec, &d);
        for &z in &[-0.7, 0.0, 0.4] {
            let lb = curves.lam_bar(z);
            let want = d.average_fn(|y| spec.lambda(y, z).powi(2)).sqrt();
            assert!((lb[0] - want).abs() < 1e-10, "lam_bar({z})");
            let hz = 1e-4;
            let fd1 = (curves.lam_bar(z + hz)[0] - curves.lam_bar(z - hz)[0]) / (2.0 * hz);
            assert!((lb[1] - fd1).abs() < 1e-7, "lam_bar'({z}): {} vs {}", lb[1], fd1);
            let fd2 = (curves.lam_bar(z + hz)[1] - curves.lam_bar(z - hz)[1]) / (2.0 * hz);
            assert!((lb[2] - fd2).abs() < 1e-6, "lam_bar''({z})");
            let fd3 = (curves.lam_bar(z + hz)[2] - curves.lam_bar(z - hz)[2]) / (2.0 * hz);
            assert!((lb[3] - fd3).abs() < 1e-5, "lam_bar'''({z})");
        }
    }

    #[test]
    fn hermite_interpolation_matches_nodes() {
        let spec = ou_model();
        let d = invariant_density(&spec).unwrap();
        let b = theta_family(&spec, &d, 0.0).unwrap();
        let i = d.grid.nearest_index(1.234);
        let y = d.grid.at(i);
        assert!((b.theta_at(ThetaId::T0, y) - b.theta(ThetaId::T0, i)).abs() < 1e-14);
        // midpoint value close to fine solution
        let ymid = y + d.grid.h / 2.0;
        let v = b.theta_at(ThetaId::T0, ymid);
        assert!((v - b.theta(ThetaId::T0, i)).abs() < 0.05 * (1.0 + v.abs()));
    }
}
