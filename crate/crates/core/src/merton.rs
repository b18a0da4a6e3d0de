//! Classical Merton fields `M(t, x; lam_bar)` and the operator algebra.
//!
//! The Merton PDE for a fixed Sharpe ratio is
//!
//! ```text
//! M_t - 1/2 lam^2 M_x^2 / M_xx = 0,   M(T, x) = U(x),
//! ```
//!
//! with risk tolerance `R = -M_x/M_xx` and operators `D_k = R^k d^k/dx^k`.
//! Power and log utilities have closed forms. General utilities go through
//! the H-transform: `H(xi, t)` defined by `M_x(t, H(xi,t)) = e^{-xi - 1/2
//! lam^2 (T-t)}` solves the linear heat equation `H_t + 1/2 lam^2 H_xixi = 0`
//! with terminal data `I(e^{-xi})`, so the nonlinear problem reduces to a
//! backward heat solve. Spatial derivatives of H are co-evolved (they satisfy
//! the same equation with differentiated terminal data) and the value M is
//! accumulated along the transform curve from
//!
//! ```text
//! d/dt M(t, H(xi,t)) = -1/2 lam^2 e^{-xi - 1/2 lam^2 (T-t)} (H_xi + H_xixi).
//! ```

use crate::error::{CoreError, Result};
use crate::jets::{MertonJet, XO};
use crate::utility::UtilitySpec;

/// Representation of `M(t, x; lam_bar)` for a fixed terminal utility.
#[derive(Debug, Clone)]
pub enum MertonField {
    Power { gamma: f64, horizon_t: f64 },
    Log { horizon_t: f64 },
    HGrid(HGridField),
}

/// Basic point values of a Merton field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MertonEval {
    pub m: f64,
    pub m_x: f64,
    pub m_xx: f64,
    pub r: f64,
}

/// Operator tags accepted by [`apply_dk`]; composition is right-to-left,
/// matching the written order `D_1 D_2 ... f`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DkOp {
    D1,
    D2,
    /// `(1/2) D_2 + D_1`, the combination generated by `L_tx(lambda) -
    /// L_tx(lam_bar)`.
    HalfD2PlusD1,
    Dx,
    Dz,
}

/// Solve the Merton problem: closed form for power/log, H-transform heat
/// solve otherwise. `query_times` lists the t-levels at which the grid field
/// must be evaluable exactly (closed forms ignore it).
pub fn solve_merton(
    utility: &UtilitySpec,
    lam_bar: f64,
    horizon_t: f64,
    query_times: &[f64],
) -> Result<MertonField> {
    if !(lam_bar >= 0.0) || !(horizon_t > 0.0) {
        return Err(CoreError::InvalidModel(format!(
            "solve_merton needs lam_bar >= 0 and T > 0, got ({lam_bar}, {horizon_t})"
        )));
    }
    if let Some(gamma) = utility.power_gamma() {
        return Ok(MertonField::Power { gamma, horizon_t });
    }
    if utility.is_log() {
        return Ok(MertonField::Log { horizon_t });
    }
    let h = solve_h_transform(utility, lam_bar, horizon_t, &HGridConfig::default(), query_times)?;
    Ok(MertonField::HGrid(h))
}

impl MertonField {
    pub fn horizon(&self) -> f64 {
        match self {
            MertonField::Power { horizon_t, .. } | MertonField::Log { horizon_t } => *horizon_t,
            MertonField::HGrid(h) => h.horizon_t,
        }
    }

    /// Pure x-jet of M at `(t, x)` for the given `lam_bar` value.
    pub fn x_jet(&self, t: f64, x: f64, lam_bar: f64) -> Vec<f64> {
        let tau = self.horizon() - t;
        match self {
            MertonField::Power { gamma, .. } => power_x_jet(*gamma, x, lam_bar, tau),
            MertonField::Log { .. } => log_x_jet(x, lam_bar, tau),
            MertonField::HGrid(h) => h.x_jet(t, x),
        }
    }

    /// Full (t, x, z)-jet context for the expansion machinery.
    /// `lam` carries `lam_bar(z)` and its first four z-derivatives.
    pub fn jet(&self, t: f64, x: f64, lam: [f64; 5]) -> MertonJet {
        let vx = self.x_jet(t, x, lam[0]);
        MertonJet::seed(&vx, lam, self.horizon() - t)
    }

    pub fn eval(&self, t: f64, x: f64, lam_bar: f64) -> MertonEval {
        let j = self.x_jet(t, x, lam_bar);
        MertonEval { m: j[0], m_x: j[1], m_xx: j[2], r: -j[1] / j[2] }
    }

    /// Smoothness budget: the largest x-derivative order that is exact.
    pub fn derivative_budget(&self) -> usize {
        match self {
            MertonField::Power { .. } | MertonField::Log { .. } => XO - 1,
            MertonField::HGrid(_) => 4,
        }
    }

    /// Dump `(t, x, M, R)` over a tensor grid as CSV for plotting.
    pub fn dump_csv(
        &self,
        path: &std::path::Path,
        ts: &[f64],
        xs: &[f64],
        lam_bar: f64,
    ) -> Result<()> {
        let mut out = String::from("t,x,m,r\n");
        for &t in ts {
            for &x in xs {
                let e = self.eval(t, x, lam_bar);
                out.push_str(&format!("{t},{x},{},{}\n", e.m, e.r));
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

fn power_x_jet(gamma: f64, x: f64, lam_bar: f64, tau: f64) -> Vec<f64> {
    let q = (1.0 - gamma) / (2.0 * gamma);
    let e = (q * lam_bar * lam_bar * tau).exp();
    let mut jet = vec![0.0; XO];
    let mut coeff = 1.0 / (1.0 - gamma);
    let mut p = 1.0 - gamma;
    jet[0] = coeff * x.powf(1.0 - gamma) * e;
    for j in 1..XO {
        coeff *= p;
        p -= 1.0;
        jet[j] = coeff * x.powf(1.0 - gamma - j as f64) * e;
    }
    jet
}

fn log_x_jet(x: f64, lam_bar: f64, tau: f64) -> Vec<f64> {
    let mut jet = vec![0.0; XO];
    jet[0] = x.ln() + 0.5 * lam_bar * lam_bar * tau;
    let mut c = 1.0;
    for j in 1..XO {
        jet[j] = c * x.powf(-(j as f64));
        c *= -(j as f64);
    }
    jet
}

/// Apply a right-to-left composition of operators to the field at a point.
pub fn apply_dk(field: &MertonField, ops: &[DkOp], t: f64, x: f64, lam: [f64; 5]) -> Result<f64> {
    let budget = field.derivative_budget();
    let consumed: usize = ops
        .iter()
        .map(|op| match op {
            DkOp::D1 | DkOp::Dx => 1,
            DkOp::D2 | DkOp::HalfD2PlusD1 => 2,
            DkOp::Dz => 2,
        })
        .sum();
    if consumed > budget {
        return Err(CoreError::DerivativeBudget { requested: consumed, budget });
    }
    let mj = field.jet(t, x, lam);
    let mut acc = mj.v.clone();
    for op in ops.iter().rev() {
        acc = match op {
            DkOp::D1 => mj.d1(&acc),
            DkOp::D2 => mj.d2(&acc),
            DkOp::HalfD2PlusD1 => mj.half_d2_plus_d1(&acc),
            DkOp::Dx => acc.dx(),
            DkOp::Dz => acc.dz(),
        };
    }
    Ok(acc.value())
}

/// Merton PDE residual `M_t - 1/2 lam^2 M_x^2 / M_xx` with the time
/// derivative taken by central differences (independent of the jet
/// machinery, which uses the PDE itself for its t-entries).
pub fn merton_residual(field: &MertonField, t: f64, x: f64, lam_bar: f64) -> Result<f64> {
    let ht = 1e-6 * field.horizon().max(1.0);
    let lo = (t - ht).max(0.0);
    let hi = (t + ht).min(field.horizon());
    if hi <= lo {
        return Err(CoreError::DomainViolation("residual needs an interior time".into()));
    }
    let m_lo = field.eval(lo, x, lam_bar).m;
    let m_hi = field.eval(hi, x, lam_bar).m;
    let m_t = (m_hi - m_lo) / (hi - lo);
    let e = field.eval(t, x, lam_bar);
    if e.m_xx == 0.0 {
        return Err(CoreError::ConcavityFailure { vxx: e.m_xx });
    }
    Ok(m_t - 0.5 * lam_bar * lam_bar * e.m_x * e.m_x / e.m_xx)
}

// ---------------------------------------------------------------------------
// H-transform heat solve
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct HGridConfig {
    pub n_xi: usize,
    pub dt: f64,
    /// Wealth range the xi-grid must cover at the terminal time.
    pub x_lo: f64,
    pub x_hi: f64,
    /// Extra xi padding beyond the wealth-mapped range.
    pub pad: f64,
}

impl Default for HGridConfig {
    fn default() -> Self {
        HGridConfig { n_xi: 2001, dt: 1e-3, x_lo: 3e-3, x_hi: 3e3, pad: 2.0 }
    }
}

/// One stored time level of the transform solve.
#[derive(Debug, Clone)]
struct HSnapshot {
    t: f64,
    h: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    h3: Vec<f64>,
    /// M(t, H(xi,t)) accumulated along the curve.
    m: Vec<f64>,
}

/// H-transform field: `H`, its xi-derivatives and the reconstructed value
/// surface on a xi-grid at selected time levels.
#[derive(Debug, Clone)]
pub struct HGridField {
    pub lam_bar: f64,
    pub horizon_t: f64,
    pub xi_lo: f64,
    pub xi_h: f64,
    pub n_xi: usize,
    snapshots: Vec<HSnapshot>,
}

/// Solve the heat equation for H (and its first three xi-derivatives)
/// backward from `t = T`, accumulating the value surface, and keep
/// snapshots at the requested times plus the terminal slice.
pub fn solve_h_transform(
    utility: &UtilitySpec,
    lam_bar: f64,
    horizon_t: f64,
    cfg: &HGridConfig,
    query_times: &[f64],
) -> Result<HGridField> {
    let xi_lo = -(utility.u1(cfg.x_lo)).ln() - cfg.pad;
    let xi_hi = -(utility.u1(cfg.x_hi)).ln() + cfg.pad;
    if !(xi_hi > xi_lo) {
        return Err(CoreError::PdeFailure("degenerate xi range".into()));
    }
    let n = cfg.n_xi;
    let dx = (xi_hi - xi_lo) / (n - 1) as f64;
    let xi = |i: usize| xi_lo + dx * i as f64;

    // Terminal data for H and derivatives from I(e^{-xi}).
    let mut h = vec![0.0; n];
    let mut h1 = vec![0.0; n];
    let mut h2 = vec![0.0; n];
    let mut h3 = vec![0.0; n];
    let mut m = vec![0.0; n];
    for i in 0..n {
        let y = (-xi(i)).exp();
        let i0 = utility.i_deriv(y, 0);
        let i1 = utility.i_deriv(y, 1);
        let i2 = utility.i_deriv(y, 2);
        let i3 = utility.i_deriv(y, 3);
        h[i] = i0;
        h1[i] = -y * i1;
        h2[i] = y * i1 + y * y * i2;
        h3[i] = -y * i1 - 3.0 * y * y * i2 - y * y * y * i3;
        m[i] = utility.u(i0);
        if !(h[i].is_finite() && m[i].is_finite()) {
            return Err(CoreError::PdeFailure(format!("terminal data overflow at xi = {}", xi(i))));
        }
    }

    // Exponential boundary rates fitted to the asymptotic form of I.
    let (beta_hi, beta_lo) = utility.i_exp_rates();
    let amp_hi = h[n - 1] * (-beta_hi * xi(n - 1)).exp();
    let amp_lo = h[0] * (-beta_lo * xi(0)).exp();

    // Time stepping on tau = T - t with Crank-Nicolson.
    let n_steps = (horizon_t / cfg.dt).ceil() as usize;
    let dt = horizon_t / n_steps as f64;
    let kappa = 0.5 * lam_bar * lam_bar;
    let r = kappa * dt / (dx * dx);

    // Requested levels plus a uniform backbone so time interpolation stays
    // accurate away from the query times.
    let mut want: Vec<f64> = query_times.to_vec();
    want.push(horizon_t);
    for k in 0..=64 {
        want.push(horizon_t * k as f64 / 64.0);
    }
    let near = |t: f64| want.iter().any(|&w| (w - t).abs() < 0.49 * dt);
    let mut snapshots: Vec<HSnapshot> = Vec::new();
    if near(horizon_t) {
        snapshots.push(HSnapshot {
            t: horizon_t,
            h: h.clone(),
            h1: h1.clone(),
            h2: h2.clone(),
            h3: h3.clone(),
            m: m.clone(),
        });
    }

    let mflux = |h1: &[f64], h2: &[f64], tau: f64| -> Vec<f64> {
        (0..n).map(|i| kappa * (-xi(i) - kappa * tau).exp() * (h1[i] + h2[i])).collect()
    };

    let mut flux_prev = mflux(&h1, &h2, 0.0);
    for step in 1..=n_steps {
        let tau_new = dt * step as f64;
        let t_new = horizon_t - tau_new;
        // Dirichlet boundaries evolve the asymptotic exponentials exactly.
        let bc = |amp: f64, beta: f64, xib: f64, k: u32| -> f64 {
            amp * beta.powi(k as i32) * (beta * xib + kappa * beta * beta * tau_new).exp()
        };
        for (arr, k) in [(&mut h, 0u32), (&mut h1, 1), (&mut h2, 2), (&mut h3, 3)] {
            let blo = bc(amp_lo, beta_lo, xi(0), k);
            let bhi = bc(amp_hi, beta_hi, xi(n - 1), k);
            cn_step(arr, r, blo, bhi);
        }
        // Trapezoid accumulation of the value surface.
        let flux_new = mflux(&h1, &h2, tau_new);
        for i in 0..n {
            m[i] += 0.5 * dt * (flux_prev[i] + flux_new[i]);
        }
        flux_prev = flux_new;

        if near(t_new) {
            snapshots.push(HSnapshot {
                t: t_new,
                h: h.clone(),
                h1: h1.clone(),
                h2: h2.clone(),
                h3: h3.clone(),
                m: m.clone(),
            });
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::PdeFailure(format!("heat solve diverged at step {step}")));
        }
    }
    snapshots.sort_by(|a, b| a.t.partial_cmp(&b.t).unwrap());
    snapshots.dedup_by(|a, b| (a.t - b.t).abs() < 1e-12);
    if snapshots.is_empty() {
        return Err(CoreError::PdeFailure("no snapshots captured".into()));
    }
    Ok(HGridField { lam_bar, horizon_t, xi_lo, xi_h: dx, n_xi: n, snapshots })
}

/// One Crank-Nicolson step of `w_tau = kappa w_xixi` with Dirichlet data.
fn cn_step(w: &mut [f64], r: f64, blo: f64, bhi: f64) {
    let n = w.len();
    let m = n - 2;
    // rhs = (I + r/2 Lap) w
    let mut rhs = vec![0.0; m];
    for i in 1..n - 1 {
        rhs[i - 1] = w[i] + 0.5 * r * (w[i - 1] - 2.0 * w[i] + w[i + 1]);
    }
    rhs[0] += 0.5 * r * blo;
    rhs[m - 1] += 0.5 * r * bhi;
    // (I - r/2 Lap) w_new = rhs, Thomas algorithm.
    let a = -0.5 * r; // sub/super diagonal
    let b = 1.0 + r; // diagonal
    let mut c_star = vec![0.0; m];
    let mut d_star = vec![0.0; m];
    c_star[0] = a / b;
    d_star[0] = rhs[0] / b;
    for i in 1..m {
        let denom = b - a * c_star[i - 1];
        c_star[i] = a / denom;
        d_star[i] = (rhs[i] - a * d_star[i - 1]) / denom;
    }
    w[n - 2] = d_star[m - 1];
    for i in (0..m - 1).rev() {
        w[i + 1] = d_star[i] - c_star[i] * w[i + 2];
    }
    w[0] = blo;
    w[n - 1] = bhi;
}

impl HGridField {
    fn xi_at(&self, i: usize) -> f64 {
        self.xi_lo + self.xi_h * i as f64
    }

    /// Snapshot values at (t, xi): cubic Lagrange in time over the stored
    /// levels (exact at stored levels), Hermite in xi.
    fn eval_quantities(&self, t: f64, xi: f64) -> (f64, f64, f64, f64, f64) {
        let snaps = &self.snapshots;
        if let Some(s) = snaps.iter().find(|s| (s.t - t).abs() < 1e-12) {
            return self.eval_on_snapshot(s, xi);
        }
        let k = snaps.partition_point(|s| s.t < t);
        let lo = k.saturating_sub(2).min(snaps.len().saturating_sub(4));
        let hi = (lo + 4).min(snaps.len());
        let window = &snaps[lo..hi];
        let mut acc = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (i, si) in window.iter().enumerate() {
            let mut l = 1.0;
            for (j, sj) in window.iter().enumerate() {
                if i != j {
                    l *= (t - sj.t) / (si.t - sj.t);
                }
            }
            let v = self.eval_on_snapshot(si, xi);
            acc.0 += l * v.0;
            acc.1 += l * v.1;
            acc.2 += l * v.2;
            acc.3 += l * v.3;
            acc.4 += l * v.4;
        }
        acc
    }

    /// Hermite interpolation in xi on one stored level:
    /// returns (H, H1, H2, H3, M).
    fn eval_on_snapshot(&self, s: &HSnapshot, xi: f64) -> (f64, f64, f64, f64, f64) {
        let pos = ((xi - self.xi_lo) / self.xi_h).clamp(0.0, (self.n_xi - 1) as f64);
        let i = (pos.floor() as usize).min(self.n_xi - 2);
        let t = pos - i as f64;
        let h = self.xi_h;
        let basis = {
            let h00 = (1.0 + 2.0 * t) * (1.0 - t) * (1.0 - t);
            let h10 = t * (1.0 - t) * (1.0 - t);
            let h01 = t * t * (3.0 - 2.0 * t);
            let h11 = t * t * (t - 1.0);
            (h00, h10, h01, h11)
        };
        let her = |v: &[f64], dv_i: f64, dv_ip: f64| -> f64 {
            basis.0 * v[i] + basis.1 * h * dv_i + basis.2 * v[i + 1] + basis.3 * h * dv_ip
        };
        let hv = her(&s.h, s.h1[i], s.h1[i + 1]);
        let h1v = her(&s.h1, s.h2[i], s.h2[i + 1]);
        let h2v = her(&s.h2, s.h3[i], s.h3[i + 1]);
        let h3v = (1.0 - t) * s.h3[i] + t * s.h3[i + 1];
        // m_xi = M_x H_xi along the curve gives slopes for the M spline.
        let tau = self.horizon_t - s.t;
        let mslope = |idx: usize| -> f64 {
            (-self.xi_at(idx) - 0.5 * self.lam_bar * self.lam_bar * tau).exp() * s.h1[idx]
        };
        let mv = her(&s.m, mslope(i), mslope(i + 1));
        (hv, h1v, h2v, h3v, mv)
    }

    /// H and its first three xi-derivatives at (t, xi).
    pub fn h_eval(&self, t: f64, xi: f64) -> (f64, f64, f64, f64) {
        let (h, h1, h2, h3, _) = self.eval_quantities(t, xi);
        (h, h1, h2, h3)
    }

    /// Spatial inverse: solve `H(xi, t) = x` for xi (H strictly increasing).
    pub fn h_inverse(&self, t: f64, x: f64) -> Result<f64> {
        let mut a = self.xi_lo;
        let mut b = self.xi_at(self.n_xi - 1);
        let fa = self.eval_quantities(t, a).0 - x;
        let fb = self.eval_quantities(t, b).0 - x;
        if fa > 0.0 || fb < 0.0 {
            return Err(CoreError::DomainViolation(format!(
                "wealth {x} outside transform range at t = {t}"
            )));
        }
        for _ in 0..60 {
            let mid = 0.5 * (a + b);
            if self.eval_quantities(t, mid).0 > x {
                b = mid;
            } else {
                a = mid;
            }
        }
        let mut xi = 0.5 * (a + b);
        for _ in 0..30 {
            let q = self.eval_quantities(t, xi);
            let step = (q.0 - x) / q.1;
            xi -= step;
            if step.abs() < 1e-14 * (1.0 + xi.abs()) {
                break;
            }
        }
        Ok(xi)
    }

    /// x-jet of M at (t, x): exact orders 0..=4, zeros beyond.
    pub fn x_jet(&self, t: f64, x: f64) -> Vec<f64> {
        let mut jet = vec![0.0; XO];
        let xi = match self.h_inverse(t, x) {
            Ok(v) => v,
            Err(_) => {
                jet.fill(f64::NAN);
                return jet;
            }
        };
        let tau = self.horizon_t - t;
        let (_, h1, h2, h3, mv) = self.eval_quantities(t, xi);
        let m_x = (-xi - 0.5 * self.lam_bar * self.lam_bar * tau).exp();
        // R = H_xi, R_x = H2/H1, R_xx = (H3 H1 - H2^2)/H1^3 on the curve.
        let r0 = h1;
        let r1 = h2 / h1;
        let r2 = (h3 * h1 - h2 * h2) / (h1 * h1 * h1);
        jet[0] = mv;
        jet[1] = m_x;
        let m_xx = -m_x / r0;
        jet[2] = m_xx;
        jet[3] = m_x * (1.0 + r1) / (r0 * r0);
        jet[4] = m_xx * (1.0 + r1) / (r0 * r0) + m_x * r2 / (r0 * r0)
            - 2.0 * m_x * (1.0 + r1) * r1 / (r0 * r0 * r0);
        jet
    }

    /// Defining-relation residual: compare `e^{-xi - 1/2 lam^2 tau}` against
    /// the independent slope `m_xi / H_xi`, with `m_xi` by centered
    /// differences of the accumulated value surface.
    pub fn defining_relation_residual(&self, t: f64, xi: f64) -> f64 {
        let tau = self.horizon_t - t;
        let target = (-xi - 0.5 * self.lam_bar * self.lam_bar * tau).exp();
        let d = self.xi_h;
        let m_plus = self.eval_quantities(t, xi + d).4;
        let m_minus = self.eval_quantities(t, xi - d).4;
        let h1 = self.eval_quantities(t, xi).1;
        let slope = (m_plus - m_minus) / (2.0 * d) / h1;
        (slope - target) / target
    }

    /// Fitted exponential growth bound `H <= A e^{beta xi}` on the grid at
    /// the earliest stored time (diagnostic; the theory asserts existence of
    /// such a bound without quantifying the constant).
    pub fn fitted_growth_bound(&self) -> (f64, f64) {
        let s = &self.snapshots[0];
        let mut beta: f64 = 0.0;
        for i in 0..self.n_xi {
            if s.h[i] > 0.0 {
                beta = beta.max(s.h1[i] / s.h[i]);
            }
        }
        let mut amp: f64 = 0.0;
        for i in 0..self.n_xi {
            amp = amp.max(s.h[i] * (-beta * self.xi_at(i)).exp());
        }
        (amp, beta)
    }
}
