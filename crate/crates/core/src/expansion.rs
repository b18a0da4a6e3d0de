//! First-order value approximation and its building blocks.
//!
//! With `v0(t,x,z) = M(t,x; lam_bar(z))` the leading-order value, the two
//! first-order corrections are explicit in the operator algebra:
//!
//! ```text
//! v10 = -1/2 (T-t) rho1 B(z) D1^2 v0
//! v01 =  1/2 (T-t)^2 rho2 lam_hat lam_bar lam_bar' g(z) D1^2 v0
//! ```
//!
//! where `B(z) = <lambda a theta_y>`. The approximation is
//! `V ~ v0 + sqrt(eps) v10 + sqrt(delta) v01`, and the w-terms (order eps,
//! eps^{3/2}, eps sqrt(delta)) are the cell correctors that cancel the low
//! orders when the full generator acts on the candidate sub/super-solutions.

use crate::averaging::{invariant_density, BundleStack, InvariantDensity, SharpeCurves, ThetaId};
use crate::error::{CoreError, Result};
use crate::jets::MertonJet;
use crate::merton::{solve_merton, MertonField};
use crate::model::ModelSpec;
use crate::utility::UtilitySpec;

/// Everything needed to evaluate the expansion at points `(t, x, y, z)`,
/// with z restricted to the nodes the bundle was built on (any z when the
/// Sharpe ratio is z-independent).
#[derive(Debug)]
pub struct ExpansionBundle {
    pub spec: ModelSpec,
    pub utility: UtilitySpec,
    pub density: InvariantDensity,
    pub curves: SharpeCurves,
    z_nodes: Vec<f64>,
    stacks: Vec<BundleStack>,
    fields: Vec<MertonField>,
}

impl ExpansionBundle {
    pub fn new(
        spec: &ModelSpec,
        utility: &UtilitySpec,
        z_nodes: &[f64],
        query_times: &[f64],
    ) -> Result<Self> {
        if z_nodes.is_empty() {
            return Err(CoreError::Config("at least one z node required".into()));
        }
        let density = invariant_density(spec)?;
        let curves = SharpeCurves::build(spec, &density);
        let mut stacks = Vec::with_capacity(z_nodes.len());
        let mut fields = Vec::with_capacity(z_nodes.len());
        for &z in z_nodes {
            let stack = BundleStack::build(spec, &density, z)?;
            let lam_bar = curves.lam_bar(z)[0];
            fields.push(solve_merton(utility, lam_bar, spec.horizon_t, query_times)?);
            stacks.push(stack);
        }
        Ok(ExpansionBundle {
            spec: spec.clone(),
            utility: utility.clone(),
            density,
            curves,
            z_nodes: z_nodes.to_vec(),
            stacks,
            fields,
        })
    }

    /// Index of the node backing a z query.
    pub fn z_index(&self, z: f64) -> Result<usize> {
        if self.spec.lambda_z_independent() {
            return Ok(0);
        }
        self.z_nodes
            .iter()
            .position(|&zn| (zn - z).abs() < 1e-9)
            .ok_or_else(|| CoreError::DomainViolation(format!("z = {z} is not a bundle node")))
    }

    pub fn stack_at(&self, z: f64) -> Result<&BundleStack> {
        Ok(&self.stacks[self.z_index(z)?])
    }

    pub fn field_at(&self, z: f64) -> Result<&MertonField> {
        Ok(&self.fields[self.z_index(z)?])
    }

    /// Field for path simulation at arbitrary z. Closed-form fields accept
    /// any `lam_bar` at evaluation, so the first field serves everywhere;
    /// grid fields fall back to the nearest solved node.
    pub fn field_for_path(&self, z: f64) -> &MertonField {
        if matches!(self.fields[0], MertonField::Power { .. } | MertonField::Log { .. }) {
            return &self.fields[0];
        }
        let mut best = 0;
        let mut dist = f64::INFINITY;
        for (i, &zn) in self.z_nodes.iter().enumerate() {
            if (zn - z).abs() < dist {
                dist = (zn - z).abs();
                best = i;
            }
        }
        &self.fields[best]
    }

    /// `lam_bar(z)` and four z-derivatives.
    pub fn lam(&self, z: f64) -> [f64; 5] {
        self.curves.lam_bar(z)
    }

    /// Seeded jet context of `v0` at `(t, x, z)`.
    pub fn jet_at(&self, t: f64, x: f64, z: f64) -> Result<MertonJet> {
        Ok(self.field_at(z)?.jet(t, x, self.lam(z)))
    }

    pub fn v0(&self, t: f64, x: f64, z: f64) -> Result<f64> {
        Ok(self.field_at(z)?.eval(t, x, self.lam(z)[0]).m)
    }

    /// Fast-scale first-order correction `v10`.
    pub fn first_order_fast(&self, t: f64, x: f64, z: f64) -> Result<f64> {
        let stack = self.stack_at(z)?;
        let b = stack.center().b_coef;
        if b == 0.0 {
            return Ok(0.0);
        }
        let tau = self.spec.horizon_t - t;
        let mj = self.jet_at(t, x, z)?;
        let d1d1 = mj.d1(&mj.d1(&mj.v)).value();
        Ok(-0.5 * tau * self.spec.correlations.rho1 * b * d1d1)
    }

    /// Slow-scale first-order correction `v01`.
    pub fn first_order_slow(&self, t: f64, x: f64, z: f64) -> Result<f64> {
        let rho2 = self.spec.correlations.rho2;
        let lam = self.lam(z);
        let lam_hat = self.curves.lam_hat(z)[0];
        let g = self.spec.g(z);
        if rho2 == 0.0 || lam[1] == 0.0 {
            return Ok(0.0);
        }
        let tau = self.spec.horizon_t - t;
        let mj = self.jet_at(t, x, z)?;
        let d1d1 = mj.d1(&mj.d1(&mj.v)).value();
        Ok(0.5 * tau * tau * rho2 * lam_hat * lam[0] * lam[1] * g * d1d1)
    }

    /// Cell correctors `(w20, w30, w11)` at `(t, x, y, z)`.
    pub fn w_terms(&self, t: f64, x: f64, y: f64, z: f64) -> Result<(f64, f64, f64)> {
        let stack = self.stack_at(z)?;
        let c = stack.center();
        let theta = c.theta_at(ThetaId::T0, y);
        let theta1 = c.theta_at(ThetaId::T1, y);
        let theta2 = c.theta_at(ThetaId::T2, y);
        let rho1 = self.spec.correlations.rho1;
        let rho2 = self.spec.correlations.rho2;
        let lam = self.lam(z);
        let lam_hat = self.curves.lam_hat(z)[0];
        let g = self.spec.g(z);
        let b = c.b_coef;
        let tau = self.spec.horizon_t - t;

        let mj = self.jet_at(t, x, z)?;
        let d1 = mj.d1(&mj.v);
        let d1d1 = mj.d1(&d1);
        let g2 = mj.half_d2_plus_d1(&d1d1).value();
        let d1v = d1.value();
        let d1d1v = d1d1.value();

        let w20 = -0.5 * theta * d1v;
        let w30 = 0.5 * tau * rho1 * theta * b * g2 + 0.5 * rho1 * theta1 * d1d1v;
        let w11 = -0.5 * tau * tau * rho2 * lam_hat * lam[0] * lam[1] * g * theta * g2
            - rho2 * tau * theta2 * g * lam[0] * lam[1] * d1d1v;
        Ok((w20, w30, w11))
    }

    /// Zeroth-order strategy `pi0 = (lambda/sigma) R(t, x; lam_bar(z))`.
    /// Valid at arbitrary z (the risk tolerance is evaluated at the analytic
    /// `lam_bar(z)` curve).
    pub fn zeroth_strategy(&self, t: f64, x: f64, y: f64, z: f64) -> Result<f64> {
        let sigma = self.spec.sigma(y, z);
        if !(sigma > 0.0) {
            return Err(CoreError::InvalidModel("sigma must be positive".into()));
        }
        let lambda = self.spec.lambda(y, z);
        let r = self.field_for_path(z).eval(t, x, self.lam(z)[0]).r;
        Ok(lambda / sigma * r)
    }

    /// First-order approximate value `v0 + sqrt(eps) v10 + sqrt(delta) v01`.
    pub fn approx_value(&self, t: f64, x: f64, z: f64, eps: f64, delta: f64) -> Result<f64> {
        Ok(self.v0(t, x, z)?
            + eps.sqrt() * self.first_order_fast(t, x, z)?
            + delta.sqrt() * self.first_order_slow(t, x, z)?)
    }

    /// Vega-Gamma residuals at a point: z-sensitivities by finite
    /// differences across the lam_bar curve (independent of the jet
    /// machinery, which builds those identities in).
    ///
    /// Returns `(|v0_z - tau lam lam' D1 v0|, |R_z - tau lam lam' R^2 R_xx|)`.
    /// Only meaningful for closed-form utilities where the field can be
    /// re-evaluated at a shifted lam_bar.
    pub fn vega_gamma_residual(&self, t: f64, x: f64, z: f64) -> Result<(f64, f64)> {
        let field = self.field_at(z)?;
        if matches!(field, MertonField::HGrid(_)) {
            return Err(CoreError::OracleInapplicable(
                "vega-gamma residual needs a closed-form field".into(),
            ));
        }
        let lam = self.lam(z);
        let tau = self.spec.horizon_t - t;
        let hz = 1e-4;
        let lam_p = self.curves.lam_bar(z + hz)[0];
        let lam_m = self.curves.lam_bar(z - hz)[0];
        let v0_z = (field.eval(t, x, lam_p).m - field.eval(t, x, lam_m).m) / (2.0 * hz);
        let r_z = (field.eval(t, x, lam_p).r - field.eval(t, x, lam_m).r) / (2.0 * hz);

        let mj = field.jet(t, x, lam);
        let d1v = mj.d1(&mj.v).value();
        let r = mj.r.value();
        let r_xx = mj.r.get(0, 0, 2);
        let res1 = (v0_z - tau * lam[0] * lam[1] * d1v).abs();
        let res2 = (r_z - tau * lam[0] * lam[1] * r * r * r_xx).abs();
        Ok((res1, res2))
    }

    /// PDE residual of `v10` (its defining linear equation), with the time
    /// derivative by finite differences.
    pub fn v10_pde_residual(&self, t: f64, x: f64, z: f64) -> Result<f64> {
        let ht = 1e-5;
        let f_t = (self.first_order_fast(t + ht, x, z)? - self.first_order_fast(t - ht, x, z)?)
            / (2.0 * ht);
        let lam = self.lam(z);
        let stack = self.stack_at(z)?;
        let b = stack.center().b_coef;
        let tau = self.spec.horizon_t - t;
        let mj = self.jet_at(t, x, z)?;
        let w = mj.d1(&mj.d1(&mj.v));
        let s = -0.5 * self.spec.correlations.rho1 * b * tau;
        let d2_part = 0.5 * lam[0] * lam[0] * mj.d2(&w).value() * s;
        let d1_part = lam[0] * lam[0] * mj.d1(&w).value() * s;
        let rhs = 0.5 * self.spec.correlations.rho1 * b * w.value();
        Ok(f_t + d2_part + d1_part - rhs)
    }

    /// Poisson consistency of the first cell corrector:
    /// `L_y w20 + L_tx(lambda(y,z)) v0 = 0` at a grid node index.
    pub fn w20_poisson_residual(&self, t: f64, x: f64, y_idx: usize, z: f64) -> Result<f64> {
        let stack = self.stack_at(z)?;
        let c = stack.center();
        let y = c.grid.at(y_idx);
        let lambda = self.spec.lambda(y, z);
        let mj = self.jet_at(t, x, z)?;
        let d1v = mj.d1(&mj.v).value();
        // L_y w20 = -1/2 (L_y theta) D1 v0 with L_y theta = stored fluct
        let ly_w20 = -0.5 * c.solution(ThetaId::T0).fluct[y_idx] * d1v;
        // L_tx(lambda) v0 via FD in t plus jet x-derivatives
        let ht = 1e-5;
        let v_t = (self.v0(t + ht, x, z)? - self.v0(t - ht, x, z)?) / (2.0 * ht);
        let d2v = mj.d2(&mj.v).value();
        let ltx = v_t + 0.5 * lambda * lambda * d2v + lambda * lambda * d1v;
        Ok(ly_w20 + ltx)
    }
}

/// Markov trading strategies the simulator understands.
#[derive(Debug, Clone, Copy)]
pub enum StrategyKind {
    /// The zeroth-order strategy `pi0` (proportional; log-coordinate
    /// simulation applies).
    ZerothOrder,
    /// Fixed fraction of wealth.
    FixedFraction(f64),
    /// No investment.
    NoInvestment,
    /// Fixed dollar amount (not proportional; arithmetic simulation with
    /// positivity flagging).
    FixedDollar(f64),
}

/// A strategy bound to the expansion bundle it may need for `R`.
pub struct StrategyField<'a> {
    pub kind: StrategyKind,
    pub bundle: &'a ExpansionBundle,
}

impl<'a> StrategyField<'a> {
    pub fn zeroth(bundle: &'a ExpansionBundle) -> Self {
        StrategyField { kind: StrategyKind::ZerothOrder, bundle }
    }

    /// Dollar amount invested at the state.
    pub fn pi(&self, t: f64, x: f64, y: f64, z: f64) -> Result<f64> {
        match self.kind {
            StrategyKind::ZerothOrder => self.bundle.zeroth_strategy(t, x, y, z),
            StrategyKind::FixedFraction(f) => Ok(f * x),
            StrategyKind::NoInvestment => Ok(0.0),
            StrategyKind::FixedDollar(d) => Ok(d),
        }
    }

    /// Proportion `pi/x` when the strategy is proportional.
    pub fn fraction(&self, t: f64, x: f64, y: f64, z: f64) -> Result<Option<f64>> {
        match self.kind {
            StrategyKind::ZerothOrder => {
                let sigma = self.bundle.spec.sigma(y, z);
                let lambda = self.bundle.spec.lambda(y, z);
                let field = self.bundle.field_for_path(z);
                let r_over_x = if let MertonField::Power { gamma, .. } = field {
                    1.0 / gamma
                } else {
                    field.eval(t, x, self.bundle.lam(z)[0]).r / x
                };
                Ok(Some(lambda / sigma * r_over_x))
            }
            StrategyKind::FixedFraction(f) => Ok(Some(f)),
            StrategyKind::NoInvestment => Ok(Some(0.0)),
            StrategyKind::FixedDollar(_) => Ok(None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{default_tanh_model, instantiate_model, Catalog, ModelConfig};

    fn bundle_tanh() -> ExpansionBundle {
        let spec = default_tanh_model(0.04, 0.01);
        let u = UtilitySpec::power(2.0).unwrap();
        ExpansionBundle::new(&spec, &u, &[0.0], &[0.0]).unwrap()
    }

    fn bundle_constant() -> ExpansionBundle {
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
            rho1: -0.4,
            rho2: -0.3,
            rho12: 0.0,
            eps: 0.04,
            delta: 0.01,
            horizon_t: 1.0,
            domain_halfwidth_sds: 8.0,
        };
        let spec = instantiate_model(&config).unwrap();
        let u = UtilitySpec::power(2.0).unwrap();
        ExpansionBundle::new(&spec, &u, &[0.0], &[0.0]).unwrap()
    }

    fn bundle_zdep() -> ExpansionBundle {
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
        let spec = instantiate_model(&config).unwrap();
        let u = UtilitySpec::power(2.0).unwrap();
        ExpansionBundle::new(&spec, &u, &[0.15], &[0.0]).unwrap()
    }

    #[test]
    fn constant_lambda_collapses_corrections() {
        let b = bundle_constant();
        assert_eq!(b.first_order_fast(0.3, 1.0, 0.0).unwrap(), 0.0);
        assert_eq!(b.first_order_slow(0.3, 1.0, 0.0).unwrap(), 0.0);
        let (w20, w30, w11) = b.w_terms(0.3, 1.0, 0.5, 0.0).unwrap();
        assert_eq!((w20, w30, w11), (0.0, 0.0, 0.0));
        // approx value equals v0 exactly for any scales
        let v0 = b.v0(0.3, 1.0, 0.0).unwrap();
        assert_eq!(b.approx_value(0.3, 1.0, 0.0, 0.3, 0.3).unwrap(), v0);
    }

    #[test]
    fn v10_power_proportional_to_v0() {
        // gamma=2: D1^2 v0 = v0/4, so v10 = -(T-t) rho1 B v0 / 8.
        let b = bundle_tanh();
        let (t, x) = (0.25, 1.4);
        let v0 = b.v0(t, x, 0.0).unwrap();
        let v10 = b.first_order_fast(t, x, 0.0).unwrap();
        let bcoef = b.stack_at(0.0).unwrap().center().b_coef;
        let want = -(1.0 - t) * (-0.4) * bcoef * v0 / 8.0;
        assert!((v10 - want).abs() < 1e-12 * want.abs().max(1e-12), "{v10} vs {want}");
        assert!(v10 != 0.0);
        // terminal zero
        assert_eq!(b.first_order_fast(1.0, x, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn v01_trivial_zeroes() {
        // z-independent lam_bar -> v01 = 0
        let b = bundle_tanh();
        assert_eq!(b.first_order_slow(0.2, 1.0, 0.0).unwrap(), 0.0);
        // t = T -> 0 even with z dependence
        let bz = bundle_zdep();
        assert_eq!(bz.first_order_slow(1.0, 1.0, 0.15).unwrap(), 0.0);
        assert!(bz.first_order_slow(0.2, 1.0, 0.15).unwrap() != 0.0);
    }

    #[test]
    fn v01_two_displayed_forms_agree() {
        // Closed form (T-t)^2 route vs D1(v0_z) route with v0_z by finite
        // differences across the lam_bar curve.
        let b = bundle_zdep();
        let z = 0.15;
        let lam = b.lam(z);
        let lam_hat = b.curves.lam_hat(z)[0];
        let g = b.spec.g(z);
        let rho2 = b.spec.correlations.rho2;
        let field = b.field_at(z).unwrap();
        let mut rng: u64 = 42;
        let mut next = || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (rng >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..100 {
            let t = 0.9 * next();
            let x = 0.2 + 4.0 * next();
            let tau = 1.0 - t;
            let form_b = b.first_order_slow(t, x, z).unwrap();
            // form A: 1/2 tau rho2 lam_hat g D1(v0_z)
            let hz = 1e-4;
            let lam_p = b.curves.lam_bar(z + hz)[0];
            let lam_m = b.curves.lam_bar(z - hz)[0];
            let hx = 1e-5 * x;
            let v0z =
                |xx: f64| (field.eval(t, xx, lam_p).m - field.eval(t, xx, lam_m).m) / (2.0 * hz);
            let d1_v0z = field.eval(t, x, lam[0]).r * (v0z(x + hx) - v0z(x - hx)) / (2.0 * hx);
            let form_a = 0.5 * tau * rho2 * lam_hat * g * d1_v0z;
            let scale = form_b.abs().max(1e-10);
            assert!(
                (form_a - form_b).abs() < 1e-5 * scale.max(1e-4),
                "forms disagree at ({t}, {x}): {form_a} vs {form_b}"
            );
        }
    }

    #[test]
    fn w_terms_power_gamma2() {
        let b = bundle_tanh();
        let (t, x, y) = (0.3, 1.0, 0.8);
        let v0 = b.v0(t, x, 0.0).unwrap();
        let theta = b.stack_at(0.0).unwrap().center().theta_at(ThetaId::T0, y);
        let (w20, _, _) = b.w_terms(t, x, y, 0.0).unwrap();
        // w20 = -1/2 theta D1 v0 = 1/4 theta v0 for gamma = 2
        assert!((w20 - 0.25 * theta * v0).abs() < 1e-12 * w20.abs().max(1e-12));
    }

    #[test]
    fn w20_poisson_consistency() {
        let b = bundle_tanh();
        let grid = b.stack_at(0.0).unwrap().center().grid.clone();
        for &yq in &[-1.7, 0.0, 0.9, 2.5] {
            let idx = grid.nearest_index(yq);
            let r = b.w20_poisson_residual(0.35, 1.2, idx, 0.0).unwrap();
            assert!(r.abs() < 1e-8, "w20 cell residual {r} at y ~ {yq}");
        }
    }

    #[test]
    fn v10_pde_residual_small() {
        let b = bundle_tanh();
        for &(t, x) in &[(0.2, 0.7), (0.5, 1.0), (0.8, 3.0)] {
            let r = b.v10_pde_residual(t, x, 0.0).unwrap();
            assert!(r.abs() < 1e-8, "v10 PDE residual {r} at ({t},{x})");
        }
    }

    #[test]
    fn vega_gamma_residuals() {
        // z-independent: identically zero
        let b = bundle_tanh();
        let (r1, r2) = b.vega_gamma_residual(0.3, 1.1, 0.0).unwrap();
        assert!(r1 < 1e-12 && r2 < 1e-12);
        // z-dependent power: small but nontrivial identity
        let bz = bundle_zdep();
        let (r1, r2) = bz.vega_gamma_residual(0.3, 1.1, 0.15).unwrap();
        assert!(r1 < 1e-6, "vega-gamma value residual {r1}");
        assert!(r2 < 1e-6, "vega-gamma risk-tolerance residual {r2}");
        // terminal: both sides vanish
        let (r1t, _) = bz.vega_gamma_residual(1.0, 1.1, 0.15).unwrap();
        assert!(r1t < 1e-9);
    }

    #[test]
    fn zeroth_strategy_values() {
        let b = bundle_constant();
        // mu=0.25, sigma=0.5, gamma=2, x=1 -> pi0 = 0.5
        let p = b.zeroth_strategy(0.0, 1.0, 0.3, 0.0).unwrap();
        assert!((p - 0.5).abs() < 1e-12);
        // wealth to zero: pi0 -> 0
        let p0 = b.zeroth_strategy(0.0, 1e-9, 0.3, 0.0).unwrap();
        assert!(p0.abs() < 1e-9);
    }

    #[test]
    fn approx_value_assembly() {
        let b = bundle_tanh();
        let (t, x) = (0.0, 1.0);
        let v0 = b.v0(t, x, 0.0).unwrap();
        let v10 = b.first_order_fast(t, x, 0.0).unwrap();
        let got = b.approx_value(t, x, 0.0, 0.04, 0.0).unwrap();
        assert!((got - (v0 + 0.2 * v10)).abs() < 1e-14);
        assert_eq!(b.approx_value(t, x, 0.0, 0.0, 0.0).unwrap(), v0);
    }


    #[test]
    fn correction_bounded_by_d1v0() {
        // |v10| <= h * D1 v0 with a finite measured constant across wealth
        // decades (the corrections inherit the D1 v0 scale).
        let b = bundle_tanh();
        let mut hmax = 0.0f64;
        for k in 0..40 {
            let x = 10f64.powf(-1.0 + 2.0 * k as f64 / 39.0);
            for &t in &[0.0, 0.5, 0.9] {
                let v10 = b.first_order_fast(t, x, 0.0).unwrap();
                let mj = b.jet_at(t, x, 0.0).unwrap();
                let d1v = mj.d1(&mj.v).value();
                assert!(d1v > 0.0);
                hmax = hmax.max(v10.abs() / d1v);
            }
        }
        assert!(hmax.is_finite() && hmax < 1.0, "measured bound constant {hmax}");
    }

    #[test]
    fn strategy_fraction_forms() {
        let b = bundle_constant();
        let s = StrategyField::zeroth(&b);
        let f = s.fraction(0.0, 1.0, 0.2, 0.0).unwrap().unwrap();
        assert!((f - 0.5).abs() < 1e-12);
        let d = StrategyField { kind: StrategyKind::FixedDollar(2.0), bundle: &b };
        assert!(d.fraction(0.0, 1.0, 0.2, 0.0).unwrap().is_none());
        assert_eq!(d.pi(0.0, 1.0, 0.2, 0.0).unwrap(), 2.0);
    }
}
