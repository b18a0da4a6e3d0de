//! Sub- and super-solution construction and numerical verification.
//!
//! The candidates are
//!
//! ```text
//! V(+-) = v0 + sqrt(eps) v10 + sqrt(delta) v01
//!       + eps w20 + eps^{3/2} w30 + eps sqrt(delta) w11
//!       +- (2T - t)(eps N_A + delta N_B + sqrt(eps delta) N_C)
//!       +- eps^2 F +- eps^{3/2} sqrt(delta) H +- eps delta G
//! ```
//!
//! with `N_i = C_i D1 v0` and corrector fields `F, G, H` chosen so that the
//! y-fluctuating parts of the order-(eps, delta, sqrt(eps delta)) coefficients
//! of `Q[V]` cancel, leaving averages that the constants `C_i` push to the
//! required sign. The sub-solution works under the zeroth-order strategy
//! (`Q^{pi0}[V-] >= 0`); the super-solution under the pointwise maximizer
//! (`sup_pi Q^pi[V+] <= 0`, which requires `V+_xx < 0`). Terminal dominance
//! pins the remaining freedom.
//!
//! Every term factors as
//!
//! ```text
//! coef * C? * tau-poly * s(z) * theta_i(y, z) * K(t, x, z)
//! ```
//!
//! with `K` one of a dozen operator composites of `v0`. Partials in all five
//! directions (t, x, xx, y, yy, z, zz, xy, xz, yz) are assembled analytically
//! from the jet tables, the theta stencils and the scalar curves, so grid
//! scans carry no finite-difference noise beyond the quadrature itself.

use serde::{Deserialize, Serialize};

use crate::averaging::{ThetaEval, ThetaId};
use crate::error::{CoreError, Result};
use crate::expansion::ExpansionBundle;
use crate::jets::{MertonJet, TxJet};
use crate::model::ModelSpec;

/// Sub- or super-solution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Sub,
    Super,
}

/// The calibration constants (one per scale channel).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    pub c_a: f64,
    pub c_b: f64,
    pub c_c: f64,
}

impl Constants {
    pub fn uniform(c: f64) -> Self {
        Constants { c_a: c, c_b: c, c_c: c }
    }

    pub fn zero() -> Self {
        Constants::uniform(0.0)
    }
}

/// Scalar function of z carried with three derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
struct ZScal([f64; 4]);

impl ZScal {
    const ONE: ZScal = ZScal([1.0, 0.0, 0.0, 0.0]);

    fn mul(self, o: ZScal) -> ZScal {
        let a = self.0;
        let b = o.0;
        ZScal([
            a[0] * b[0],
            a[1] * b[0] + a[0] * b[1],
            a[2] * b[0] + 2.0 * a[1] * b[1] + a[0] * b[2],
            a[3] * b[0] + 3.0 * a[2] * b[1] + 3.0 * a[1] * b[2] + a[0] * b[3],
        ])
    }

    fn scale(self, c: f64) -> ZScal {
        ZScal([self.0[0] * c, self.0[1] * c, self.0[2] * c, self.0[3] * c])
    }

    /// The derivative as a scalar in its own right.
    fn shift(self) -> ZScal {
        ZScal([self.0[1], self.0[2], self.0[3], 0.0])
    }
}

/// Operator composites of `v0` used by the terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum KId {
    V0,
    D1,
    D11,
    G1,
    G2,
    D1G2,
    D13,
    D1z,
    D1D11z,
    Q1,
    Q2,
    Q3,
}

const K_COUNT: usize = 12;

impl KId {
    fn index(self) -> usize {
        match self {
            KId::V0 => 0,
            KId::D1 => 1,
            KId::D11 => 2,
            KId::G1 => 3,
            KId::G2 => 4,
            KId::D1G2 => 5,
            KId::D13 => 6,
            KId::D1z => 7,
            KId::D1D11z => 8,
            KId::Q1 => 9,
            KId::Q2 => 10,
            KId::Q3 => 11,
        }
    }
}

/// Point extraction of one composite.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
struct KEval {
    v: f64,
    dt: f64,
    dx: f64,
    dxx: f64,
    dz: f64,
    dzz: f64,
    dxz: f64,
}

fn extract(j: &TxJet) -> KEval {
    KEval {
        v: j.get(0, 0, 0),
        dt: j.get(1, 0, 0),
        dx: j.get(0, 0, 1),
        dxx: j.get(0, 0, 2),
        dz: j.get(0, 1, 0),
        dzz: j.get(0, 2, 0),
        dxz: j.get(0, 1, 1),
    }
}

/// All composites at a fixed `(t, x, z)`, plus the risk tolerance.
#[derive(Debug, Clone)]
struct KSet {
    k: [KEval; K_COUNT],
    r: f64,
}

fn build_kset(mj: &MertonJet) -> KSet {
    let v = &mj.v;
    let d1 = mj.d1(v);
    let d11 = mj.d1(&d1);
    let g1 = mj.half_d2_plus_d1(&d1);
    let g2 = mj.half_d2_plus_d1(&d11);
    let d1g2 = mj.d1(&g2);
    let d13 = mj.d1(&d11);
    let d1z = d1.dz();
    let d1d11z = mj.d1(&d11.dz());
    let vx = v.dx();
    let vxx = vx.dx();
    let inv_vxx = vxx.recip();
    // A~ = v_x (D1^2 v0)_xx / v_xx - (D1^2 v0)_x
    let atilde = vx.mul(&d11.dx().dx()).mul(&inv_vxx).sub(&d11.dx());
    let q1 = atilde.mul(&atilde).mul(&inv_vxx);
    let q2 = atilde.mul(&d1.dx()).mul(&inv_vxx);
    let q3 = d1.dx().mul(&d1.dx()).mul(&inv_vxx);
    let mut k = [KEval::default(); K_COUNT];
    k[KId::V0.index()] = extract(v);
    k[KId::D1.index()] = extract(&d1);
    k[KId::D11.index()] = extract(&d11);
    k[KId::G1.index()] = extract(&g1);
    k[KId::G2.index()] = extract(&g2);
    k[KId::D1G2.index()] = extract(&d1g2);
    k[KId::D13.index()] = extract(&d13);
    k[KId::D1z.index()] = extract(&d1z);
    k[KId::D1D11z.index()] = extract(&d1d11z);
    k[KId::Q1.index()] = extract(&q1);
    k[KId::Q2.index()] = extract(&q2);
    k[KId::Q3.index()] = extract(&q3);
    KSet { k, r: mj.r.value() }
}

/// Which calibration constant scales a term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CiTag {
    None,
    A,
    B,
    C,
}

/// One additive term of a candidate solution.
#[derive(Debug, Clone)]
struct Term {
    coef: f64,
    ci: CiTag,
    /// Coefficients of powers of tau = T - t.
    tau_poly: [f64; 5],
    zs: ZScal,
    theta: Option<ThetaId>,
    k: KId,
    /// Half-powers of eps and delta in the weight.
    we: u8,
    wd: u8,
}

impl Term {
    fn weight(&self, eps: f64, delta: f64, c: &Constants) -> f64 {
        let ci = match self.ci {
            CiTag::None => 1.0,
            CiTag::A => c.c_a,
            CiTag::B => c.c_b,
            CiTag::C => c.c_c,
        };
        let we = eps.powf(self.we as f64 / 2.0);
        let wd = delta.powf(self.wd as f64 / 2.0);
        self.coef * ci * we * wd
    }
}

/// Candidate partials at a point.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PointPartials {
    pub v: f64,
    pub vt: f64,
    pub vx: f64,
    pub vxx: f64,
    pub vy: f64,
    pub vyy: f64,
    pub vz: f64,
    pub vzz: f64,
    pub vxy: f64,
    pub vxz: f64,
    pub vyz: f64,
}

/// Verification grid. `y_idxs` index the Poisson grid so theta values carry
/// no interpolation error.
#[derive(Debug, Clone)]
pub struct VerifyGrid {
    pub ts: Vec<f64>,
    pub xs: Vec<f64>,
    pub y_idxs: Vec<usize>,
    pub zs: Vec<f64>,
}

impl VerifyGrid {
    /// Spec default: five times, twelve log-spaced wealth decades, nine
    /// nodes across +-4 invariant standard deviations in each factor.
    pub fn default_for(spec: &ModelSpec, bundle: &ExpansionBundle) -> VerifyGrid {
        let t = spec.horizon_t;
        let ts = vec![0.0, 0.25 * t, 0.5 * t, 0.75 * t, 0.99 * t];
        let xs: Vec<f64> =
            (0..12).map(|i| 10f64.powf(-1.0 + 2.0 * i as f64 / 11.0)).collect();
        let grid = &bundle.density.grid;
        let mut y_idxs = Vec::new();
        for k in 0..9 {
            let y = spec.fast_mean() + spec.fast_std() * (-4.0 + k as f64);
            y_idxs.push(grid.nearest_index(y));
        }
        y_idxs.dedup();
        let zs = if spec.lambda_z_independent() {
            vec![spec.slow_mean()]
        } else {
            (0..9).map(|k| spec.slow_mean() + spec.slow_std() * (-4.0 + k as f64)).collect()
        };
        VerifyGrid { ts, xs, y_idxs, zs }
    }
}

/// Grid verifier with cached composites, thetas and scalars.
pub struct Verifier<'a> {
    pub bundle: &'a ExpansionBundle,
    pub grid: VerifyGrid,
    /// ts plus the terminal time (used by dominance checks).
    ts_ext: Vec<f64>,
    ksets: Vec<KSet>,
    thetas: Vec<[ThetaEval; 12]>,
    sub_terms: Vec<Vec<Term>>,
    super_terms: Vec<Vec<Term>>,
}

const ALL_THETAS: [ThetaId; 12] = [
    ThetaId::T0,
    ThetaId::T1,
    ThetaId::T2,
    ThetaId::T3,
    ThetaId::T4,
    ThetaId::T5,
    ThetaId::T6,
    ThetaId::T7,
    ThetaId::T8,
    ThetaId::T9,
    ThetaId::T10,
    ThetaId::T11,
];

impl<'a> Verifier<'a> {
    pub fn new(bundle: &'a ExpansionBundle, grid: VerifyGrid) -> Result<Self> {
        let spec = &bundle.spec;
        let mut ts_ext = grid.ts.clone();
        if ts_ext.iter().all(|&t| (t - spec.horizon_t).abs() > 1e-12) {
            ts_ext.push(spec.horizon_t);
        }
        let nz = grid.zs.len();
        let nt = ts_ext.len();
        let nx = grid.xs.len();
        let ny = grid.y_idxs.len();

        let mut ksets = Vec::with_capacity(nz * nt * nx);
        for &z in &grid.zs {
            for &t in &ts_ext {
                for &x in &grid.xs {
                    let mj = bundle.jet_at(t, x, z)?;
                    ksets.push(build_kset(&mj));
                }
            }
        }
        let mut thetas = Vec::with_capacity(nz * ny);
        for &z in &grid.zs {
            let stack = bundle.stack_at(z)?;
            for &iy in &grid.y_idxs {
                let mut row = [ThetaEval::default(); 12];
                for (k, id) in ALL_THETAS.iter().enumerate() {
                    row[k] = stack.theta_full(spec, *id, iy);
                }
                thetas.push(row);
            }
        }
        let mut sub_terms = Vec::with_capacity(nz);
        let mut super_terms = Vec::with_capacity(nz);
        for &z in &grid.zs {
            sub_terms.push(build_terms(bundle, z, Variant::Sub)?);
            super_terms.push(build_terms(bundle, z, Variant::Super)?);
        }
        Ok(Verifier { bundle, grid, ts_ext, ksets, thetas, sub_terms, super_terms })
    }

    fn kset(&self, iz: usize, it: usize, ix: usize) -> &KSet {
        &self.ksets[(iz * self.ts_ext.len() + it) * self.grid.xs.len() + ix]
    }

    fn theta_row(&self, iz: usize, iy: usize) -> &[ThetaEval; 12] {
        &self.thetas[iz * self.grid.y_idxs.len() + iy]
    }

    fn terms(&self, variant: Variant, iz: usize) -> &[Term] {
        match variant {
            Variant::Sub => &self.sub_terms[iz],
            Variant::Super => &self.super_terms[iz],
        }
    }

    /// Terminal time index in `ts_ext`.
    fn terminal_it(&self) -> usize {
        let t = self.bundle.spec.horizon_t;
        self.ts_ext.iter().position(|&v| (v - t).abs() < 1e-12).unwrap()
    }

    /// Candidate partials at grid indices.
    pub fn partials(
        &self,
        variant: Variant,
        c: &Constants,
        eps: f64,
        delta: f64,
        iz: usize,
        it: usize,
        ix: usize,
        iy: usize,
    ) -> PointPartials {
        self.partials_from_terms(self.terms(variant, iz), c, eps, delta, iz, it, ix, iy)
    }

    /// Partials of the candidate truncated to the first `n_terms` shared
    /// terms (1 = v0 alone, 3 = the first-order approximation).
    pub fn partials_prefix(
        &self,
        n_terms: usize,
        eps: f64,
        delta: f64,
        iz: usize,
        it: usize,
        ix: usize,
        iy: usize,
    ) -> PointPartials {
        let terms = &self.sub_terms[iz][..n_terms];
        self.partials_from_terms(terms, &Constants::zero(), eps, delta, iz, it, ix, iy)
    }

    /// `sup_pi Q^pi` of a truncated candidate (HJB residual probe for the
    /// plain approximation).
    pub fn q_hat_prefix(
        &self,
        n_terms: usize,
        eps: f64,
        delta: f64,
        iz: usize,
        it: usize,
        ix: usize,
        iy: usize,
    ) -> Result<f64> {
        let p = self.partials_prefix(n_terms, eps, delta, iz, it, ix, iy);
        let (_t, _x, y, z) = self.coords(iz, it, ix, iy);
        let pi = self.pi_star_from_partials(&p, eps, delta, y, z)?;
        Ok(self.q_at_pi(&p, pi, eps, delta, iz, it, ix, iy))
    }

    #[allow(clippy::too_many_arguments)]
    fn partials_from_terms(
        &self,
        term_list: &[Term],
        c: &Constants,
        eps: f64,
        delta: f64,
        iz: usize,
        it: usize,
        ix: usize,
        iy: usize,
    ) -> PointPartials {
        let tau = self.bundle.spec.horizon_t - self.ts_ext[it];
        let kset = self.kset(iz, it, ix);
        let trow = self.theta_row(iz, iy);
        let mut p = PointPartials::default();
        for term in term_list {
            let w = term.weight(eps, delta, c);
            if w == 0.0 {
                continue;
            }
            let k = &kset.k[term.k.index()];
            let s = term.zs.0;
            // tau polynomial and its t-derivative (d/dt tau^n = -n tau^{n-1})
            let mut pv = 0.0;
            let mut pt = 0.0;
            let mut tp = 1.0;
            for (n, &cn) in term.tau_poly.iter().enumerate() {
                pv += cn * tp;
                if n >= 1 {
                    pt -= cn * n as f64 * tau.powi(n as i32 - 1);
                }
                tp *= tau;
            }

            // s(z) x K(t,x,z) partials
            let txv = s[0] * k.v;
            let tx_t = s[0] * k.dt;
            let tx_x = s[0] * k.dx;
            let tx_xx = s[0] * k.dxx;
            let tx_z = s[1] * k.v + s[0] * k.dz;
            let tx_zz = s[2] * k.v + 2.0 * s[1] * k.dz + s[0] * k.dzz;
            let tx_xz = s[1] * k.dx + s[0] * k.dxz;

            // full tx-part with the tau polynomial
            let f = pv * txv;
            let f_t = pt * txv + pv * tx_t;
            let f_x = pv * tx_x;
            let f_xx = pv * tx_xx;
            let f_z = pv * tx_z;
            let f_zz = pv * tx_zz;
            let f_xz = pv * tx_xz;

            let (tv, ty, tyy, tz, tzz, tyz) = match term.theta {
                None => (1.0, 0.0, 0.0, 0.0, 0.0, 0.0),
                Some(id) => {
                    let e = &trow[id.index()];
                    (e.v, e.dy, e.dyy, e.dz, e.dzz, e.dyz)
                }
            };

            p.v += w * tv * f;
            p.vt += w * tv * f_t;
            p.vx += w * tv * f_x;
            p.vxx += w * tv * f_xx;
            p.vy += w * ty * f;
            p.vyy += w * tyy * f;
            p.vz += w * (tz * f + tv * f_z);
            p.vzz += w * (tzz * f + 2.0 * tz * f_z + tv * f_zz);
            p.vxy += w * ty * f_x;
            p.vxz += w * (tz * f_x + tv * f_xz);
            p.vyz += w * (tyz * f + ty * f_z);
        }
        p
    }

    /// `Q^{pi0}[V]` at grid indices.
    pub fn q_pi0(
        &self,
        variant: Variant,
        c: &Constants,
        eps: f64,
        delta: f64,
        iz: usize,
        it: usize,
        ix: usize,
        iy: usize,
    ) -> f64 {
        let p = self.partials(variant, c, eps, delta, iz, it, ix, iy);
        self.q_pi0_from_partials(&p, eps, delta, iz, it, ix, iy)
    }

    fn coords(&self, iz: usize, it: usize, ix: usize, iy: usize) -> (f64, f64, f64, f64) {
        let spec = &self.bundle.spec;
        let y = self.bundle.density.grid.at(self.grid.y_idxs[iy]);
        let _ = spec;
        (self.ts_ext[it], self.grid.xs[ix], y, self.grid.zs[iz])
    }

    fn q_pi0_from_partials(
        &self,
        p: &PointPartials,
        eps: f64,
        delta: f64,
        iz: usize,
        it: usize,
        ix: usize,
        iy: usize,
    ) -> f64 {
        let spec = &self.bundle.spec;
        let (_t, _x, y, z) = self.coords(iz, it, ix, iy);
        let lam = spec.lambda(y, z);
        let a = spec.a(y);
        let b = spec.b(y);
        let g = spec.g(z);
        let cz = spec.c(z);
        let rho1 = spec.correlations.rho1;
        let rho2 = spec.correlations.rho2;
        let rho12 = spec.correlations.rho12;
        let r = self.kset(iz, it, ix).r;

        p.vt + 0.5 * lam * lam * r * r * p.vxx + lam * lam * r * p.vx
            + (b * p.vy + 0.5 * a * a * p.vyy) / eps
            + (delta / eps).sqrt() * rho12 * a * g * p.vyz
            + delta * (cz * p.vz + 0.5 * g * g * p.vzz)
            + rho1 * a * lam * r * p.vxy / eps.sqrt()
            + delta.sqrt() * rho2 * g * lam * r * p.vxz
    }

    /// First-order-condition maximizer `pi*` from candidate partials.
    pub fn pi_star_from_partials(
        &self,
        p: &PointPartials,
        eps: f64,
        delta: f64,
        y: f64,
        z: f64,
    ) -> Result<f64> {
        if !(p.vxx < 0.0) {
            return Err(CoreError::ConcavityFailure { vxx: p.vxx });
        }
        let spec = &self.bundle.spec;
        let lam = spec.lambda(y, z);
        let a = spec.a(y);
        let g = spec.g(z);
        let sigma = spec.sigma(y, z);
        let rho1 = spec.correlations.rho1;
        let rho2 = spec.correlations.rho2;
        let num = lam * p.vx + rho1 * a * p.vxy / eps.sqrt() + delta.sqrt() * rho2 * g * p.vxz;
        Ok(-num / (sigma * p.vxx))
    }

    /// `Q^pi[V]` at an arbitrary strategy value.
    pub fn q_at_pi(
        &self,
        p: &PointPartials,
        pi: f64,
        eps: f64,
        delta: f64,
        iz: usize,
        it: usize,
        ix: usize,
        iy: usize,
    ) -> f64 {
        let spec = &self.bundle.spec;
        let (_t, _x, y, z) = self.coords(iz, it, ix, iy);
        let lam = spec.lambda(y, z);
        let a = spec.a(y);
        let b = spec.b(y);
        let g = spec.g(z);
        let cz = spec.c(z);
        let sigma = spec.sigma(y, z);
        let rho1 = spec.correlations.rho1;
        let rho2 = spec.correlations.rho2;
        let rho12 = spec.correlations.rho12;
        p.vt
            + (b * p.vy + 0.5 * a * a * p.vyy) / eps
            + (delta / eps).sqrt() * rho12 * a * g * p.vyz
            + delta * (cz * p.vz + 0.5 * g * g * p.vzz)
            + 0.5 * pi * pi * sigma * sigma * p.vxx
            + pi * (lam * sigma * p.vx
                + rho1 * a * sigma * p.vxy / eps.sqrt()
                + delta.sqrt() * rho2 * g * sigma * p.vxz)
    }

    /// `sup_pi Q^pi[V]` via the closed-form maximizer. Returns the value and
    /// the concavity margin `V_xx`.
    pub fn q_hat(
        &self,
        variant: Variant,
        c: &Constants,
        eps: f64,
        delta: f64,
        iz: usize,
        it: usize,
        ix: usize,
        iy: usize,
    ) -> Result<(f64, f64)> {
        let p = self.partials(variant, c, eps, delta, iz, it, ix, iy);
        let (_t, _x, y, z) = self.coords(iz, it, ix, iy);
        let pi = self.pi_star_from_partials(&p, eps, delta, y, z)?;
        Ok((self.q_at_pi(&p, pi, eps, delta, iz, it, ix, iy), p.vxx))
    }

    /// The corrector blocks `(F, G, H)` of a variant at grid indices, as
    /// they contribute to the candidate (signs included) at unit scale
    /// weights. Exact zeros for constant Sharpe ratios with zero constants.
    pub fn corrector_fgh(
        &self,
        variant: Variant,
        c: &Constants,
        iz: usize,
        it: usize,
        ix: usize,
        iy: usize,
    ) -> (f64, f64, f64) {
        let tau = self.bundle.spec.horizon_t - self.ts_ext[it];
        let kset = self.kset(iz, it, ix);
        let trow = self.theta_row(iz, iy);
        let mut f = 0.0;
        let mut g = 0.0;
        let mut h = 0.0;
        for term in self.terms(variant, iz) {
            let slot = match (term.we, term.wd) {
                (4, 0) => &mut f,
                (2, 2) => &mut g,
                (3, 1) => &mut h,
                _ => continue,
            };
            let w = term.weight(1.0, 1.0, c);
            let k = &kset.k[term.k.index()];
            let mut pv = 0.0;
            let mut tp = 1.0;
            for &cn in &term.tau_poly {
                pv += cn * tp;
                tp *= tau;
            }
            let tv = term.theta.map(|id| trow[id.index()].v).unwrap_or(1.0);
            *slot += w * pv * term.zs.0[0] * tv * k.v;
        }
        (f, g, h)
    }

    /// Candidate value at grid indices.
    pub fn value(
        &self,
        variant: Variant,
        c: &Constants,
        eps: f64,
        delta: f64,
        iz: usize,
        it: usize,
        ix: usize,
        iy: usize,
    ) -> f64 {
        self.partials(variant, c, eps, delta, iz, it, ix, iy).v
    }

    /// Terminal dominance margins: `min U - V_sub(T)` and `min V_super(T) - U`.
    pub fn terminal_margins(&self, c: &Constants, eps: f64, delta: f64) -> (f64, f64) {
        let it = self.terminal_it();
        let mut sub_margin = f64::INFINITY;
        let mut super_margin = f64::INFINITY;
        for iz in 0..self.grid.zs.len() {
            for ix in 0..self.grid.xs.len() {
                let u = self.bundle.utility.u(self.grid.xs[ix]);
                for iy in 0..self.grid.y_idxs.len() {
                    let vs = self.value(Variant::Sub, c, eps, delta, iz, it, ix, iy);
                    let vp = self.value(Variant::Super, c, eps, delta, iz, it, ix, iy);
                    sub_margin = sub_margin.min(u - vs);
                    super_margin = super_margin.min(vp - u);
                }
            }
        }
        (sub_margin, super_margin)
    }

    /// Scan the interior grid for the five calibration conditions.
    pub fn scan_grid(&self, c: &Constants, eps: f64, delta: f64) -> ScanOutcome {
        let mut min_q_sub = f64::INFINITY;
        let mut max_q_super = f64::NEG_INFINITY;
        let mut max_vxx = f64::NEG_INFINITY;
        let mut sandwich_min = f64::INFINITY;
        let mut gap_over_scale = f64::NEG_INFINITY;
        let mut concavity_ok = true;
        for iz in 0..self.grid.zs.len() {
            for it in 0..self.grid.ts.len() {
                for ix in 0..self.grid.xs.len() {
                    for iy in 0..self.grid.y_idxs.len() {
                        let q_sub = self.q_pi0(Variant::Sub, c, eps, delta, iz, it, ix, iy);
                        min_q_sub = min_q_sub.min(q_sub);
                        let ps = self.partials(Variant::Super, c, eps, delta, iz, it, ix, iy);
                        max_vxx = max_vxx.max(ps.vxx);
                        if ps.vxx < 0.0 {
                            let (_t, _x, y, z) = self.coords(iz, it, ix, iy);
                            let pi =
                                self.pi_star_from_partials(&ps, eps, delta, y, z).unwrap();
                            let q = self.q_at_pi(&ps, pi, eps, delta, iz, it, ix, iy);
                            max_q_super = max_q_super.max(q);
                        } else {
                            concavity_ok = false;
                        }
                        let v_sub = self.value(Variant::Sub, c, eps, delta, iz, it, ix, iy);
                        let gap = ps.v - v_sub;
                        sandwich_min = sandwich_min.min(gap);
                        gap_over_scale = gap_over_scale.max(gap / (eps + delta));
                    }
                }
            }
        }
        let (sub_term, super_term) = self.terminal_margins(c, eps, delta);
        ScanOutcome {
            min_q_sub,
            max_q_super,
            max_vxx,
            concavity_ok,
            sub_terminal: sub_term,
            super_terminal: super_term,
            sandwich_min,
            gap_over_scale,
        }
    }

    /// Doubling search for the smallest power-of-two constants satisfying
    /// all verification conditions simultaneously.
    pub fn calibrate_constants(&self, eps: f64, delta: f64) -> Result<Calibration> {
        const CAP_LOG2: u32 = 20;
        let mut last_binding = String::new();
        for log2c in 0..=CAP_LOG2 {
            let c = Constants::uniform((1u64 << log2c) as f64);
            let s = self.scan_grid(&c, eps, delta);
            match s.binding() {
                None => {
                    return Ok(Calibration { constants: c, outcome: s, binding_below: last_binding })
                }
                Some(b) => last_binding = b,
            }
        }
        Err(CoreError::CalibrationCap { cap_log2: CAP_LOG2, eps, delta, binding: last_binding })
    }

    /// Full verification report at given scales (calibrating first).
    pub fn verify(&self, eps: f64, delta: f64) -> Result<VerifyReport> {
        let cal = self.calibrate_constants(eps, delta)?;
        let s = &cal.outcome;
        Ok(VerifyReport {
            eps,
            delta,
            c_a: cal.constants.c_a,
            c_b: cal.constants.c_b,
            c_c: cal.constants.c_c,
            min_q_sub: s.min_q_sub,
            max_q_super: s.max_q_super,
            sub_terminal_margin: s.sub_terminal,
            super_terminal_margin: s.super_terminal,
            concavity_margin: s.max_vxx,
            sandwich_min: s.sandwich_min,
            gap_over_eps_plus_delta: s.gap_over_scale,
            binding_below: cal.binding_below,
            pass: true,
        })
    }
}

/// Grid scan summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanOutcome {
    pub min_q_sub: f64,
    pub max_q_super: f64,
    pub max_vxx: f64,
    pub concavity_ok: bool,
    pub sub_terminal: f64,
    pub super_terminal: f64,
    pub sandwich_min: f64,
    pub gap_over_scale: f64,
}

impl ScanOutcome {
    /// Name of the first violated condition, if any. Small negative slack
    /// absorbs quadrature rounding.
    fn binding(&self) -> Option<String> {
        const SLACK: f64 = 1e-11;
        if self.min_q_sub < -SLACK {
            return Some(format!("Q_pi0[V-] >= 0 (min {})", self.min_q_sub));
        }
        if self.sub_terminal < -1e-12 {
            return Some(format!("U - V-(T) >= 0 (min {})", self.sub_terminal));
        }
        if !self.concavity_ok || self.max_vxx >= 0.0 {
            return Some(format!("V+_xx < 0 (max {})", self.max_vxx));
        }
        if self.max_q_super > SLACK {
            return Some(format!("Qhat[V+] <= 0 (max {})", self.max_q_super));
        }
        if self.super_terminal < -1e-12 {
            return Some(format!("V+(T) - U >= 0 (min {})", self.super_terminal));
        }
        if self.sandwich_min < -1e-12 {
            return Some(format!("V- <= V+ (min gap {})", self.sandwich_min));
        }
        None
    }
}

#[derive(Debug, Clone)]
pub struct Calibration {
    pub constants: Constants,
    pub outcome: ScanOutcome,
    /// The condition that failed at half the returned constants
    /// (empty when C = 1 already verifies).
    pub binding_below: String,
}

/// JSON-serializable verification report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyReport {
    pub eps: f64,
    pub delta: f64,
    pub c_a: f64,
    pub c_b: f64,
    pub c_c: f64,
    pub min_q_sub: f64,
    pub max_q_super: f64,
    pub sub_terminal_margin: f64,
    pub super_terminal_margin: f64,
    pub concavity_margin: f64,
    pub sandwich_min: f64,
    pub gap_over_eps_plus_delta: f64,
    pub binding_below: String,
    pub pass: bool,
}

// ---------------------------------------------------------------------------
// Term assembly
// ---------------------------------------------------------------------------

/// Build the term list of one variant at a z node. The common prefix
/// (v0, first-order corrections, w-terms) is shared; the N blocks flip sign
/// with the variant; the corrector fields F, G, H implement the fluctuation
/// cancellation, with the super variant additionally carrying the quadratic
/// terms generated by the optimized Hamiltonian.
fn build_terms(bundle: &ExpansionBundle, z: f64, variant: Variant) -> Result<Vec<Term>> {
    let spec = &bundle.spec;
    let stack = bundle.stack_at(z)?;
    let curves = &bundle.curves;
    let lam = curves.lam_bar(z);
    let hat = curves.lam_hat(z);
    let rho1 = spec.correlations.rho1;
    let rho2 = spec.correlations.rho2;
    let rho12 = spec.correlations.rho12;
    let big_t = spec.horizon_t;
    let sgn = match variant {
        Variant::Sub => -1.0,
        Variant::Super => 1.0,
    };

    // Scalar curves with three z-derivatives.
    let one = ZScal::ONE;
    let c1 = ZScal([
        lam[0] * lam[1],
        lam[1] * lam[1] + lam[0] * lam[2],
        3.0 * lam[1] * lam[2] + lam[0] * lam[3],
        4.0 * lam[1] * lam[3] + 3.0 * lam[2] * lam[2] + lam[0] * lam[4],
    ]);
    let lamhat = ZScal([hat[0], hat[1], hat[2], hat[3]]);
    let lambar2 = ZScal([
        lam[0] * lam[0],
        2.0 * lam[0] * lam[1],
        2.0 * lam[1] * lam[1] + 2.0 * lam[0] * lam[2],
        6.0 * lam[1] * lam[2] + 2.0 * lam[0] * lam[3],
    ]);
    let g = ZScal([spec.g(z), spec.dg_dz(z), 0.0, 0.0]);
    let b = ZScal(stack.z_scalar(|bb| bb.b_coef));
    let s_eps = b.scale(-0.5 * rho1);
    let s_eps_d = s_eps.shift();
    let s_delta = lamhat.mul(c1).mul(g).scale(0.5 * rho2);
    let s_delta_d = s_delta.shift();

    let p0 = [1.0, 0.0, 0.0, 0.0, 0.0]; // 1
    let p1 = [0.0, 1.0, 0.0, 0.0, 0.0]; // tau
    let p2 = [0.0, 0.0, 1.0, 0.0, 0.0]; // tau^2
    let p3 = [0.0, 0.0, 0.0, 1.0, 0.0]; // tau^3
    let p4 = [0.0, 0.0, 0.0, 0.0, 1.0]; // tau^4
    let p2t = [big_t, 1.0, 0.0, 0.0, 0.0]; // 2T - t = T + tau

    let t = |coef: f64,
             ci: CiTag,
             tau_poly: [f64; 5],
             zs: ZScal,
             theta: Option<ThetaId>,
             k: KId,
             we: u8,
             wd: u8| Term { coef, ci, tau_poly, zs, theta, k, we, wd };

    let mut terms = vec![
        // v0 + sqrt(eps) v10 + sqrt(delta) v01
        t(1.0, CiTag::None, p0, one, None, KId::V0, 0, 0),
        t(1.0, CiTag::None, p1, s_eps, None, KId::D11, 1, 0),
        t(1.0, CiTag::None, p2, s_delta, None, KId::D11, 0, 1),
        // w20, w30, w11
        t(-0.5, CiTag::None, p0, one, Some(ThetaId::T0), KId::D1, 2, 0),
        t(0.5 * rho1, CiTag::None, p1, b, Some(ThetaId::T0), KId::G2, 3, 0),
        t(0.5 * rho1, CiTag::None, p0, one, Some(ThetaId::T1), KId::D11, 3, 0),
        t(-1.0, CiTag::None, p2, s_delta, Some(ThetaId::T0), KId::G2, 2, 1),
        t(-1.0 * rho2, CiTag::None, p1, c1.mul(g), Some(ThetaId::T2), KId::D11, 2, 1),
        // N blocks: +- (2T - t) C_i D1 v0
        t(sgn, CiTag::A, p2t, one, None, KId::D1, 2, 0),
        t(sgn, CiTag::B, p2t, one, None, KId::D1, 0, 2),
        t(sgn, CiTag::C, p2t, one, None, KId::D1, 1, 1),
    ];

    // F block (weight eps^2). The pure-fluctuation part enters V- as
    // -eps^2 F_sub and V+ as +eps^2 F_sup with F_sup = -F_sub on those
    // terms, so the final coefficients coincide; the C_A penalty term has
    // the same sign inside both F's and therefore flips with the variant.
    terms.extend([
        t(0.5, CiTag::None, p0, one, Some(ThetaId::T4), KId::G1, 4, 0),
        t(-0.5, CiTag::None, p0, lambar2, Some(ThetaId::T5), KId::G1, 4, 0),
        t(-0.5 * rho1 * rho1, CiTag::None, p1, b, Some(ThetaId::T1), KId::D1G2, 4, 0),
        t(-0.5 * rho1 * rho1, CiTag::None, p0, one, Some(ThetaId::T3), KId::D13, 4, 0),
        t(-sgn, CiTag::A, p2t, one, Some(ThetaId::T0), KId::G1, 4, 0),
    ]);

    // G block (weight eps delta): D1 of the z-derivative of v01 against
    // theta2, plus the C_B penalty.
    terms.extend([
        t(-rho2, CiTag::None, p2, g.mul(s_delta_d), Some(ThetaId::T2), KId::D13, 2, 2),
        t(-rho2, CiTag::None, p2, g.mul(s_delta), Some(ThetaId::T2), KId::D1D11z, 2, 2),
        t(-sgn, CiTag::B, p2t, one, Some(ThetaId::T0), KId::G1, 2, 2),
    ]);

    // H block (weight eps^{3/2} delta^{1/2}).
    terms.extend([
        t(-rho2, CiTag::None, p1, g.mul(s_eps_d), Some(ThetaId::T2), KId::D13, 3, 1),
        t(-rho2, CiTag::None, p1, g.mul(s_eps), Some(ThetaId::T2), KId::D1D11z, 3, 1),
        t(0.5 * rho12, CiTag::None, p0, g, Some(ThetaId::T10), KId::D1, 3, 1),
        t(0.5 * rho12, CiTag::None, p0, g, Some(ThetaId::T11), KId::D1z, 3, 1),
        t(rho1, CiTag::None, p2, s_delta, Some(ThetaId::T1), KId::D1G2, 3, 1),
        t(rho1 * rho2, CiTag::None, p1, c1.mul(g), Some(ThetaId::T8), KId::D13, 3, 1),
        t(-sgn, CiTag::C, p2t, one, Some(ThetaId::T0), KId::G1, 3, 1),
    ]);

    // Super-only quadratic corrector terms.
    if matches!(variant, Variant::Super) {
        terms.extend([
            // F quadratics
            t(0.5, CiTag::None, p2, s_eps.mul(s_eps), Some(ThetaId::T0), KId::Q1, 4, 0),
            t(0.5 * rho1, CiTag::None, p1, s_eps, Some(ThetaId::T1), KId::Q2, 4, 0),
            t(0.125 * rho1 * rho1, CiTag::None, p0, one, Some(ThetaId::T9), KId::Q3, 4, 0),
            // G quadratics
            t(0.5, CiTag::None, p4, s_delta.mul(s_delta), Some(ThetaId::T0), KId::Q1, 2, 2),
            t(-rho2, CiTag::None, p3, g.mul(s_delta).mul(c1), Some(ThetaId::T2), KId::Q2, 2, 2),
            // H quadratics
            t(1.0, CiTag::None, p3, s_eps.mul(s_delta), Some(ThetaId::T0), KId::Q1, 3, 1),
            t(-rho2, CiTag::None, p2, g.mul(s_eps).mul(c1), Some(ThetaId::T2), KId::Q2, 3, 1),
            t(0.5 * rho1, CiTag::None, p2, s_delta, Some(ThetaId::T1), KId::Q2, 3, 1),
            t(-0.5 * rho1 * rho2, CiTag::None, p1, g.mul(c1), Some(ThetaId::T11), KId::Q3, 3, 1),
        ]);
    }

    Ok(terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{default_tanh_model, instantiate_model, Catalog, ModelConfig};
    use crate::utility::UtilitySpec;

    fn make_spec(lambda_y: f64, lambda_z: f64, rho1: f64, rho2: f64, rho12: f64) -> ModelSpec {
        let config = ModelConfig {
            catalog: Catalog::TanhSharpe {
                lambda0: 0.3,
                lambda_y,
                lambda_z,
                sigma0: 0.5,
                kappa_y: 1.0,
                m_y: 0.0,
                a0: std::f64::consts::SQRT_2,
                kappa_z: 1.0,
                m_z: 0.0,
                g0: 1.0,
            },
            rho1,
            rho2,
            rho12,
            eps: 0.01,
            delta: 0.01,
            horizon_t: 1.0,
            domain_halfwidth_sds: 8.0,
        };
        instantiate_model(&config).unwrap()
    }

    fn verifier_for<'a>(bundle: &'a ExpansionBundle) -> Verifier<'a> {
        let grid = VerifyGrid::default_for(&bundle.spec, bundle);
        Verifier::new(bundle, grid).unwrap()
    }

    fn tanh_bundle() -> ExpansionBundle {
        let spec = default_tanh_model(0.01, 0.01);
        let u = UtilitySpec::power(2.0).unwrap();
        let t = spec.horizon_t;
        ExpansionBundle::new(&spec, &u, &[0.0], &[0.0, 0.25 * t, 0.5 * t, 0.75 * t, 0.99 * t, t])
            .unwrap()
    }

    fn zdep_bundle() -> ExpansionBundle {
        let spec = make_spec(0.2, 0.1, -0.4, -0.3, 0.1);
        let u = UtilitySpec::power(2.0).unwrap();
        let zs: Vec<f64> = (0..9).map(|k| spec.slow_mean() + spec.slow_std() * (-4.0 + k as f64)).collect();
        ExpansionBundle::new(&spec, &u, &zs, &[0.0]).unwrap()
    }

    fn constant_bundle() -> ExpansionBundle {
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
            eps: 0.01,
            delta: 0.01,
            horizon_t: 1.0,
            domain_halfwidth_sds: 8.0,
        };
        let spec = instantiate_model(&config).unwrap();
        let u = UtilitySpec::power(2.0).unwrap();
        ExpansionBundle::new(&spec, &u, &[0.0], &[0.0]).unwrap()
    }

    /// Solve a small Vandermonde system sum_k c_k u_i^k = q_i.
    fn solve_vandermonde(us: &[f64], qs: &[f64]) -> Vec<f64> {
        let n = us.len();
        let mut a = vec![vec![0.0; n + 1]; n];
        for i in 0..n {
            let mut p = 1.0;
            for k in 0..n {
                a[i][k] = p;
                p *= us[i];
            }
            a[i][n] = qs[i];
        }
        // Gaussian elimination with partial pivoting.
        for col in 0..n {
            let piv = (col..n).max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap()).unwrap();
            a.swap(col, piv);
            for row in col + 1..n {
                let f = a[row][col] / a[col][col];
                for k in col..=n {
                    a[row][k] -= f * a[col][k];
                }
            }
        }
        let mut c = vec![0.0; n];
        for row in (0..n).rev() {
            let mut acc = a[row][n];
            for k in row + 1..n {
                acc -= a[row][k] * c[k];
            }
            c[row] = acc / a[row][row];
        }
        c
    }

    #[test]
    fn candidates_collapse_to_v0_at_zero_scales() {
        let b = tanh_bundle();
        let v = verifier_for(&b);
        let c = Constants::uniform(7.0);
        for &variant in &[Variant::Sub, Variant::Super] {
            let val = v.value(variant, &c, 0.0, 0.0, 0, 1, 3, 2);
            let v0 = b.v0(v.ts_ext[1], v.grid.xs[3], 0.0).unwrap();
            assert_eq!(val, v0, "{variant:?} at zero scales");
        }
    }

    #[test]
    fn constant_lambda_sandwich_is_pure_n_block() {
        let b = constant_bundle();
        let v = verifier_for(&b);
        let c = Constants::uniform(1.0);
        let (eps, delta) = (0.02, 0.03);
        let (it, ix) = (1, 4);
        let t = v.ts_ext[it];
        let x = v.grid.xs[ix];
        let vm = v.value(Variant::Sub, &c, eps, delta, 0, it, ix, 0);
        let vp = v.value(Variant::Super, &c, eps, delta, 0, it, ix, 0);
        // D1 v0 = R v0_x with R = x/2 for gamma = 2
        let e = b.field_at(0.0).unwrap().eval(t, x, 0.5);
        let d1v = e.r * e.m_x;
        let want = 2.0 * (2.0 - t) * (eps + delta + (eps * delta).sqrt()) * d1v;
        assert!(
            (vp - vm - want).abs() < 1e-13 * want.abs(),
            "sandwich gap {} vs {want}",
            vp - vm
        );
        // terminal dominance is exact: V-(T) - U = -T (eps+delta+sqrt) C D1v0
        let (sub_m, sup_m) = v.terminal_margins(&c, eps, delta);
        let it_term = v.terminal_it();
        let mut expected_min = f64::INFINITY;
        for &xx in &v.grid.xs {
            let et = b.field_at(0.0).unwrap().eval(1.0, xx, 0.5);
            expected_min =
                expected_min.min((eps + delta + (eps * delta).sqrt()) * 1.0 * et.r * et.m_x);
        }
        assert!((sub_m - expected_min).abs() < 1e-12 * expected_min.abs());
        assert!((sup_m - expected_min).abs() < 1e-12 * expected_min.abs());
        let _ = it_term;
    }

    #[test]
    fn n_block_scales_with_constants() {
        // V+ - V- at two constant levels differs by the N-block increment.
        let b = tanh_bundle();
        let v = verifier_for(&b);
        let (eps, delta) = (0.02, 0.02);
        let (it, ix, iy) = (2, 5, 3);
        let t = v.ts_ext[it];
        let x = v.grid.xs[ix];
        let gap = |cv: f64| {
            v.value(Variant::Super, &Constants::uniform(cv), eps, delta, 0, it, ix, iy)
                - v.value(Variant::Sub, &Constants::uniform(cv), eps, delta, 0, it, ix, iy)
        };
        let mj = b.jet_at(t, x, 0.0).unwrap();
        let d1v = mj.d1(&mj.v).value();
        let g1v = mj.half_d2_plus_d1(&mj.d1(&mj.v)).value();
        let theta = {
            let stack = b.stack_at(0.0).unwrap();
            stack.center().theta(crate::averaging::ThetaId::T0, v.grid.y_idxs[iy])
        };
        let weights = eps + delta + (eps * delta).sqrt();
        let wcorr = eps * eps + eps * delta + eps * eps.sqrt() * delta.sqrt();
        let dc = 3.0;
        // N blocks plus the C-scaled theta penalties inside F, G, H.
        let want = 2.0 * (2.0 - t) * dc * (weights * d1v - wcorr * theta * g1v);
        let got = gap(4.0) - gap(1.0);
        assert!((got - want).abs() < 1e-10 * want.abs(), "{got} vs {want}");
    }

    #[test]
    fn sub_eps_channel_cancellation_and_average() {
        // Q^{pi0}[V-](eps, 0) is a polynomial c0 + c1 u + ... + c4 u^4 in
        // u = sqrt(eps). The construction forces c0 ~ c1 ~ 0 and the
        // eps-coefficient c2 = I_eps to be y-independent with average
        // <I_eps> = -1/2 <theta lam^2> G1 + 1/2 tau rho1^2 B^2 D1G2
        //           + 1/2 rho1^2 B1 D13 + C_A D1.
        let b = tanh_bundle();
        let v = verifier_for(&b);
        let c = Constants::uniform(2.0);
        let us = [0.05, 0.08, 0.12, 0.18, 0.27];
        let (iz, it, ix) = (0usize, 1usize, 6usize);
        let mut i_eps_by_y = Vec::new();
        for iy in 0..v.grid.y_idxs.len() {
            let qs: Vec<f64> = us
                .iter()
                .map(|&u| v.q_pi0(Variant::Sub, &c, u * u, 0.0, iz, it, ix, iy))
                .collect();
            let coefs = solve_vandermonde(&us, &qs);
            let scale = coefs[2].abs().max(1e-6);
            assert!(coefs[0].abs() < 1e-9 * scale.max(1.0), "c0 = {}", coefs[0]);
            assert!(coefs[1].abs() < 1e-9 * scale.max(1.0), "c1 = {}", coefs[1]);
            i_eps_by_y.push(coefs[2]);
        }
        let avg = i_eps_by_y.iter().sum::<f64>() / i_eps_by_y.len() as f64;
        for (iy, val) in i_eps_by_y.iter().enumerate() {
            assert!(
                (val - avg).abs() <= 1e-6 * avg.abs() + 1e-9,
                "I_eps fluctuates at iy={iy}: {val} vs avg {avg}"
            );
        }
        // closed-form average
        let stack = b.stack_at(0.0).unwrap();
        let bb = stack.center();
        let kset = v.kset(iz, it, ix);
        let tau = 1.0 - v.ts_ext[it];
        let rho1 = b.spec.correlations.rho1;
        let want = -0.5 * bb.avg_theta_lam2 * kset.k[KId::G1.index()].v
            + 0.5 * tau * rho1 * rho1 * bb.b_coef * bb.b_coef * kset.k[KId::D1G2.index()].v
            + 0.5 * rho1 * rho1 * bb.b1_coef * kset.k[KId::D13.index()].v
            + c.c_a * kset.k[KId::D1.index()].v;
        assert!(
            (avg - want).abs() < 1e-7 * want.abs().max(1e-4),
            "<I_eps> = {avg} vs closed form {want}"
        );
    }

    #[test]
    fn sub_ray_cancellation_all_channels() {
        // Along delta = eps the polynomial in u = sqrt(eps) has degree 8;
        // c0 = c1 = 0 and the combined eps-coefficient (I_eps + I_delta +
        // I_epsdelta) must be y-independent. Exercises F, G and H at once,
        // including the cross-channel theta10/theta11 terms.
        let b = zdep_bundle();
        let grid = VerifyGrid::default_for(&b.spec, &b);
        let v = Verifier::new(&b, grid).unwrap();
        let c = Constants::uniform(2.0);
        let us = [0.05, 0.07, 0.09, 0.12, 0.15, 0.19, 0.24, 0.3, 0.36];
        let (iz, it, ix) = (3usize, 2usize, 6usize);
        let mut coef_by_y = Vec::new();
        for iy in (0..v.grid.y_idxs.len()).step_by(2) {
            let qs: Vec<f64> = us
                .iter()
                .map(|&u| v.q_pi0(Variant::Sub, &c, u * u, u * u, iz, it, ix, iy))
                .collect();
            let coefs = solve_vandermonde(&us, &qs);
            let scale = coefs[2].abs().max(1e-6);
            assert!(coefs[0].abs() < 1e-7 * scale.max(1.0), "c0 = {}", coefs[0]);
            assert!(coefs[1].abs() < 1e-7 * scale.max(1.0), "c1 = {}", coefs[1]);
            coef_by_y.push(coefs[2]);
        }
        let avg = coef_by_y.iter().sum::<f64>() / coef_by_y.len() as f64;
        for val in &coef_by_y {
            assert!(
                (val - avg).abs() <= 1e-5 * avg.abs() + 1e-8,
                "combined order-eps coefficient fluctuates: {val} vs {avg}"
            );
        }
    }

    #[test]
    fn super_eps_coefficient_flat_in_y() {
        // Qhat[V+]/eps at small eps approaches a y-independent I_eps.
        let b = tanh_bundle();
        let v = verifier_for(&b);
        let c = Constants::uniform(2.0);
        let eps = 1e-6;
        let (iz, it, ix) = (0usize, 1usize, 6usize);
        let mut vals = Vec::new();
        for iy in 0..v.grid.y_idxs.len() {
            let (q, vxx) = v.q_hat(Variant::Super, &c, eps, 0.0, iz, it, ix, iy).unwrap();
            assert!(vxx < 0.0);
            vals.push(q / eps);
        }
        let avg = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!(avg < 0.0, "super eps-coefficient must be negative, got {avg}");
        for val in &vals {
            assert!(
                (val - avg).abs() < 5e-3 * avg.abs(),
                "I_eps (super) varies in y: {val} vs {avg}"
            );
        }
    }

    #[test]
    fn terminal_dominance_detector() {
        // With C = 0 and nonzero theta the terminal comparison must fail.
        let b = tanh_bundle();
        let v = verifier_for(&b);
        let (sub_m, _sup_m) = v.terminal_margins(&Constants::zero(), 0.1, 0.0);
        assert!(sub_m < 0.0, "dominance should fail at C=0, margin {sub_m}");
        // and pass for large C at small eps
        let (sub_m2, sup_m2) = v.terminal_margins(&Constants::uniform(4.0), 0.001, 0.0);
        assert!(sub_m2 >= 0.0 && sup_m2 >= 0.0);
    }

    #[test]
    fn pi_star_reduces_to_pi0_without_correlations() {
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
            eps: 0.01,
            delta: 0.01,
            horizon_t: 1.0,
            domain_halfwidth_sds: 8.0,
        };
        let spec = instantiate_model(&config).unwrap();
        let u = UtilitySpec::power(2.0).unwrap();
        let b = ExpansionBundle::new(&spec, &u, &[0.0], &[0.0]).unwrap();
        let v = verifier_for(&b);
        // C = 0 makes V+ = v0 exactly for the constant model.
        let p = v.partials(Variant::Super, &Constants::zero(), 0.01, 0.01, 0, 1, 5, 2);
        let (t, x, y, z) = v.coords(0, 1, 5, 2);
        let pi = v.pi_star_from_partials(&p, 0.01, 0.01, y, z).unwrap();
        let pi0 = b.zeroth_strategy(t, x, y, z).unwrap();
        assert!((pi - pi0).abs() < 1e-12 * pi0.abs(), "{pi} vs {pi0}");
        // concavity violation detector
        let mut bad = p;
        bad.vxx = -bad.vxx;
        assert!(matches!(
            v.pi_star_from_partials(&bad, 0.01, 0.01, y, z),
            Err(CoreError::ConcavityFailure { .. })
        ));
        // pi* maximizes the quadratic
        let q_star = v.q_at_pi(&p, pi, 0.01, 0.01, 0, 1, 5, 2);
        for mult in [0.9, 1.1] {
            let q_off = v.q_at_pi(&p, pi * mult, 0.01, 0.01, 0, 1, 5, 2);
            assert!(q_star >= q_off - 1e-15, "pi* not maximal: {q_star} < {q_off}");
        }
    }

    #[test]
    fn calibration_tanh_model() {
        let b = tanh_bundle();
        let v = verifier_for(&b);
        let cal = v.calibrate_constants(0.01, 0.01).unwrap();
        assert!(cal.constants.c_a >= 1.0);
        let s = &cal.outcome;
        assert!(s.min_q_sub >= -1e-8, "min Q sub {}", s.min_q_sub);
        assert!(s.max_q_super <= 1e-8, "max Q super {}", s.max_q_super);
        assert!(s.max_vxx < 0.0, "concavity margin {}", s.max_vxx);
        assert!(s.sub_terminal >= -1e-10 && s.super_terminal >= -1e-10);
        assert!(s.sandwich_min >= -1e-12, "sandwich {}", s.sandwich_min);

        // halving eps cannot increase the returned constants
        let cal2 = v.calibrate_constants(0.02, 0.02).unwrap();
        assert!(cal.constants.c_a <= cal2.constants.c_a);
    }

    #[test]
    fn calibration_zdep_model() {
        let b = zdep_bundle();
        let grid = VerifyGrid::default_for(&b.spec, &b);
        let v = Verifier::new(&b, grid).unwrap();
        let rep = v.verify(0.01, 0.01).unwrap();
        assert!(rep.pass);
        assert!(rep.min_q_sub >= -1e-8);
        assert!(rep.max_q_super <= 1e-8);
        assert!(rep.concavity_margin < 0.0);
        assert!(rep.sandwich_min >= -1e-12);
    }

    #[test]
    fn calibration_cap_is_a_diagnostic() {
        let b = tanh_bundle();
        let v = verifier_for(&b);
        let r = v.calibrate_constants(0.5, 0.5);
        match r {
            Ok(_) => {}
            Err(CoreError::CalibrationCap { .. }) => {}
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn corrector_blocks_term_audit() {
        // Constant lambda with C = 0: F = G = H = 0 exactly.
        let b = constant_bundle();
        let v = verifier_for(&b);
        let (f, g, h) = v.corrector_fgh(Variant::Sub, &Constants::zero(), 0, 1, 4, 2);
        assert_eq!((f, g, h), (0.0, 0.0, 0.0));

        // rho1 = rho2 = 0 with a z-independent Sharpe ratio: the only
        // surviving H content is the C_C theta block.
        let spec = make_spec(0.2, 0.0, 0.0, 0.0, 0.1);
        let u = UtilitySpec::power(2.0).unwrap();
        let bundle =
            ExpansionBundle::new(&spec, &u, &[0.0], &[0.0, 0.25, 0.5, 0.75, 0.99, 1.0]).unwrap();
        let vv = verifier_for(&bundle);
        let c = Constants::uniform(3.0);
        let (iz, it, ix, iy) = (0, 1, 5, 2);
        let (_f, _g, h) = vv.corrector_fgh(Variant::Sub, &c, iz, it, ix, iy);
        let t = vv.grid.ts[it];
        let x = vv.grid.xs[ix];
        let mj = bundle.jet_at(t, x, 0.0).unwrap();
        let g1 = mj.half_d2_plus_d1(&mj.d1(&mj.v)).value();
        let theta = bundle
            .stack_at(0.0)
            .unwrap()
            .center()
            .theta(crate::averaging::ThetaId::T0, vv.grid.y_idxs[iy]);
        let want = (2.0 - t) * c.c_c * theta * g1;
        assert!(
            (h - want).abs() < 1e-12 * want.abs().max(1e-12),
            "H term audit: {h} vs {want}"
        );
    }

    #[test]
    fn constant_model_calibrates_at_one() {
        let b = constant_bundle();
        let v = verifier_for(&b);
        let cal = v.calibrate_constants(0.01, 0.01).unwrap();
        assert_eq!(cal.constants.c_a, 1.0);
        assert_eq!(cal.binding_below, "");
    }
}
