//! Scale sweeps, log-log slope fits, and report emission.
//!
//! A sweep walks a decreasing epsilon ladder (with delta coupled by rule),
//! computes the first-order approximation at a fixed evaluation point, pits
//! it against an oracle (distortion PDE or Monte Carlo under the
//! zeroth-order strategy), and fits the slope of `log |error|` against
//! `log(eps + delta)`. First-order accuracy shows up as a fitted slope
//! near one.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::expansion::{ExpansionBundle, StrategyField};
use crate::model::{instantiate_model, ModelConfig, ModelSpec};
use crate::montecarlo::{estimate_value, simulate_paths, SimConfig};
use crate::oracle::{solve_distortion, OracleConfig};
use crate::subsuper::{Verifier, VerifyGrid};
use crate::utility::{make_utility, UtilityConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleChoice {
    Distortion,
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DeltaRule {
    /// "zero" or "eps"
    Named(DeltaNamed),
    /// fixed numeric delta
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaNamed {
    Zero,
    Eps,
}

impl DeltaRule {
    pub fn delta_for(&self, eps: f64) -> f64 {
        match self {
            DeltaRule::Named(DeltaNamed::Zero) => 0.0,
            DeltaRule::Named(DeltaNamed::Eps) => eps,
            DeltaRule::Fixed(d) => *d,
        }
    }
}

fn default_delta_rule() -> DeltaRule {
    DeltaRule::Named(DeltaNamed::Zero)
}

/// `[sweep]` table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepTable {
    pub eps_ladder: Vec<f64>,
    #[serde(default = "default_delta_rule")]
    pub delta: DeltaRule,
    pub oracle: OracleChoice,
    #[serde(default)]
    pub eval_t: f64,
    #[serde(default = "default_eval_x")]
    pub eval_x: f64,
    /// Defaults to the fast-factor invariant mean.
    pub eval_y: Option<f64>,
    /// Defaults to the slow-factor mean.
    pub eval_z: Option<f64>,
    /// Calibrate and verify the sandwich at every ladder point.
    #[serde(default)]
    pub verify_rows: bool,
}

fn default_eval_x() -> f64 {
    1.0
}

/// `[mc]` table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McTable {
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    #[serde(default)]
    pub antithetic: bool,
}

/// `[verify]` table for the standalone verifier command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyTable {
    pub eps: f64,
    pub delta: f64,
}

/// Full config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepConfig {
    pub model: ModelConfig,
    pub utility: UtilityConfig,
    pub sweep: SweepTable,
    pub mc: Option<McTable>,
    pub verify: Option<VerifyTable>,
}

impl SweepConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: SweepConfig =
            toml::from_str(text).map_err(|e| CoreError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let ladder = &self.sweep.eps_ladder;
        if ladder.len() < 4 {
            return Err(CoreError::Config(
                "eps ladder needs at least 4 points for a slope fit".into(),
            ));
        }
        if !ladder.windows(2).all(|w| w[1] < w[0]) {
            return Err(CoreError::Config("eps ladder must be strictly decreasing".into()));
        }
        if matches!(self.sweep.oracle, OracleChoice::MonteCarlo) && self.mc.is_none() {
            return Err(CoreError::Config("monte_carlo oracle needs an [mc] table".into()));
        }
        Ok(())
    }
}

/// One ladder row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub eps: f64,
    pub delta: f64,
    pub v_tilde: f64,
    pub oracle_value: f64,
    pub abs_error: f64,
    pub mc_mean: Option<f64>,
    pub mc_ci_halfwidth: Option<f64>,
    pub constants: Option<[f64; 3]>,
    pub min_q_sub: Option<f64>,
    pub max_q_super: Option<f64>,
}

/// Sweep outcome with the fitted slope.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub rows: Vec<SweepRow>,
    pub slope: Option<f64>,
    pub slope_stderr: Option<f64>,
    pub degenerate_zero_error: bool,
    pub oracle: OracleChoice,
    pub eval_point: [f64; 4],
}

/// Run the ladder.
pub fn run_sweep(cfg: &SweepConfig) -> Result<AccuracyReport> {
    cfg.validate()?;
    let utility = make_utility(&cfg.utility)?;
    let mut rows = Vec::new();
    let mut eval_point = [0.0; 4];
    for &eps in &cfg.sweep.eps_ladder {
        let delta = cfg.sweep.delta.delta_for(eps);
        let mut mc_cfg = cfg.model.clone();
        mc_cfg.eps = eps;
        mc_cfg.delta = delta;
        let spec = instantiate_model(&mc_cfg)?;
        let eval_y = cfg.sweep.eval_y.unwrap_or_else(|| spec.fast_mean());
        let eval_z = cfg.sweep.eval_z.unwrap_or_else(|| spec.slow_mean());
        let (t, x) = (cfg.sweep.eval_t, cfg.sweep.eval_x);
        eval_point = [t, x, eval_y, eval_z];

        let bundle = ExpansionBundle::new(&spec, &utility, &[eval_z], &[t])?;
        let v_tilde = bundle.approx_value(t, x, eval_z, eps, delta)?;

        let (oracle_value, mc_mean, mc_ci) = match cfg.sweep.oracle {
            OracleChoice::Distortion => {
                let field = solve_distortion(&utility, &spec, &OracleConfig::default(), &[t])?;
                (field.value(t, x, eval_y), None, None)
            }
            OracleChoice::MonteCarlo => {
                let mc = cfg.mc.as_ref().expect("validated");
                let strat = StrategyField::zeroth(&bundle);
                let sim = SimConfig {
                    n_paths: mc.n_paths,
                    n_steps: mc.n_steps,
                    seed: mc.seed,
                    antithetic: mc.antithetic,
                    x0: x,
                    y0: eval_y,
                    z0: eval_z,
                };
                let stats = simulate_paths(&bundle, &strat, &sim)?;
                let (mean, hw) = estimate_value(&stats)?;
                (mean, Some(mean), Some(hw))
            }
        };

        let (constants, min_q_sub, max_q_super) = if cfg.sweep.verify_rows && delta > 0.0 {
            let grid = VerifyGrid::default_for(&spec, &bundle);
            let verifier = Verifier::new(&bundle, grid)?;
            match verifier.verify(eps, delta) {
                Ok(rep) => (
                    Some([rep.c_a, rep.c_b, rep.c_c]),
                    Some(rep.min_q_sub),
                    Some(rep.max_q_super),
                ),
                Err(CoreError::CalibrationCap { .. }) => (None, None, None),
                Err(e) => return Err(e),
            }
        } else {
            (None, None, None)
        };

        rows.push(SweepRow {
            eps,
            delta,
            v_tilde,
            oracle_value,
            abs_error: (oracle_value - v_tilde).abs(),
            mc_mean,
            mc_ci_halfwidth: mc_ci,
            constants,
            min_q_sub,
            max_q_super,
        });
    }

    // Slope fit over rows with non-degenerate errors (errors at the oracle's
    // own numerical tolerance carry no rate information).
    let scale = rows.iter().map(|r| r.oracle_value.abs()).fold(0.0f64, f64::max);
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.abs_error > 1e-9 * scale.max(1.0))
        .map(|r| ((r.eps + r.delta).ln(), r.abs_error.ln()))
        .collect();
    let degenerate = pts.len() < rows.len().min(4);
    let (slope, stderr) = if degenerate {
        (None, None)
    } else {
        let (s, se) = fit_slope(&pts);
        (Some(s), Some(se))
    };
    Ok(AccuracyReport {
        rows,
        slope,
        slope_stderr: stderr,
        degenerate_zero_error: degenerate,
        oracle: cfg.sweep.oracle,
        eval_point,
    })
}

/// Least-squares slope with its standard error.
pub fn fit_slope(pts: &[(f64, f64)]) -> (f64, f64) {
    let n = pts.len() as f64;
    let xb = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let yb = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - xb) * (p.0 - xb)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - xb) * (p.1 - yb)).sum();
    let slope = sxy / sxx;
    let intercept = yb - slope * xb;
    let ss_res: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let stderr = if pts.len() > 2 { (ss_res / (n - 2.0) / sxx).sqrt() } else { 0.0 };
    (slope, stderr)
}

// ---------------------------------------------------------------------------
// Emission
// ---------------------------------------------------------------------------

/// Round to 12 significant digits (the numeric output contract).
pub fn sig12(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let d = 11 - x.abs().log10().floor() as i32;
    let m = 10f64.powi(d);
    (x * m).round() / m
}

/// Format with 12 significant digits.
pub fn fmt12(x: f64) -> String {
    format!("{:.11e}", x)
}

/// Write `report.csv`, `report.json` and the plot-ready `slope.dat`.
pub fn emit_report(report: &AccuracyReport, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;

    let mut csv = String::new();
    csv.push_str(
        "eps,delta,eps_plus_delta,v_tilde,oracle_value,abs_error,mc_mean,mc_ci_halfwidth,c_a,c_b,c_c\n",
    );
    for r in &report.rows {
        let opt = |v: Option<f64>| v.map(fmt12).unwrap_or_default();
        let cs = r.constants.map(|c| (fmt12(c[0]), fmt12(c[1]), fmt12(c[2])));
        let (ca, cb, cc) = cs.unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            fmt12(r.eps),
            fmt12(r.delta),
            fmt12(r.eps + r.delta),
            fmt12(r.v_tilde),
            fmt12(r.oracle_value),
            fmt12(r.abs_error),
            opt(r.mc_mean),
            opt(r.mc_ci_halfwidth),
            ca,
            cb,
            cc,
        ));
    }
    std::fs::write(out_dir.join("report.csv"), csv)?;

    let rounded = round_report(report);
    let json = serde_json::to_string_pretty(&rounded)
        .map_err(|e| CoreError::Config(e.to_string()))?;
    std::fs::write(out_dir.join("report.json"), json)?;

    let mut dat = String::new();
    for r in &report.rows {
        if r.abs_error > 0.0 {
            dat.push_str(&format!("{} {}\n", fmt12((r.eps + r.delta).ln()), fmt12(r.abs_error.ln())));
        }
    }
    let mut f = std::fs::File::create(out_dir.join("slope.dat"))?;
    f.write_all(dat.as_bytes())?;
    Ok(())
}

fn round_report(report: &AccuracyReport) -> AccuracyReport {
    let mut r = report.clone();
    for row in &mut r.rows {
        row.eps = sig12(row.eps);
        row.delta = sig12(row.delta);
        row.v_tilde = sig12(row.v_tilde);
        row.oracle_value = sig12(row.oracle_value);
        row.abs_error = sig12(row.abs_error);
        row.mc_mean = row.mc_mean.map(sig12);
        row.mc_ci_halfwidth = row.mc_ci_halfwidth.map(sig12);
        row.constants = row.constants.map(|c| [sig12(c[0]), sig12(c[1]), sig12(c[2])]);
        row.min_q_sub = row.min_q_sub.map(sig12);
        row.max_q_super = row.max_q_super.map(sig12);
    }
    r.slope = r.slope.map(sig12);
    r.slope_stderr = r.slope_stderr.map(sig12);
    r
}

/// Build an `ExpansionBundle` and verifier for a standalone verification.
pub fn run_verify(cfg: &SweepConfig) -> Result<crate::subsuper::VerifyReport> {
    let v = cfg
        .verify
        .as_ref()
        .ok_or_else(|| CoreError::Config("missing [verify] table".into()))?;
    let utility = make_utility(&cfg.utility)?;
    let mut mc = cfg.model.clone();
    mc.eps = v.eps;
    mc.delta = v.delta;
    let spec = instantiate_model(&mc)?;
    let zs: Vec<f64> = if spec.lambda_z_independent() {
        vec![spec.slow_mean()]
    } else {
        (0..9).map(|k| spec.slow_mean() + spec.slow_std() * (-4.0 + k as f64)).collect()
    };
    let t = spec.horizon_t;
    let times = vec![0.0, 0.25 * t, 0.5 * t, 0.75 * t, 0.99 * t, t];
    let bundle = ExpansionBundle::new(&spec, &utility, &zs, &times)?;
    let grid = VerifyGrid::default_for(&spec, &bundle);
    let verifier = Verifier::new(&bundle, grid)?;
    verifier.verify(v.eps, v.delta)
}

/// Simulate under the zeroth-order strategy per the config.
pub fn run_simulate(
    cfg: &SweepConfig,
    overrides: Option<(usize, usize, u64)>,
) -> Result<(f64, f64, SimConfig)> {
    let mc = cfg.mc.as_ref().ok_or_else(|| CoreError::Config("missing [mc] table".into()))?;
    let utility = make_utility(&cfg.utility)?;
    let spec = instantiate_model(&cfg.model)?;
    let (n_paths, n_steps, seed) =
        overrides.unwrap_or((mc.n_paths, mc.n_steps, mc.seed));
    let eval_z = cfg.sweep.eval_z.unwrap_or_else(|| spec.slow_mean());
    let bundle = ExpansionBundle::new(&spec, &utility, &[eval_z], &[0.0])?;
    let strat = StrategyField::zeroth(&bundle);
    let sim = SimConfig {
        n_paths,
        n_steps,
        seed,
        antithetic: mc.antithetic,
        x0: cfg.sweep.eval_x,
        y0: cfg.sweep.eval_y.unwrap_or_else(|| spec.fast_mean()),
        z0: eval_z,
    };
    let stats = simulate_paths(&bundle, &strat, &sim)?;
    let (mean, hw) = estimate_value(&stats)?;
    Ok((mean, hw, sim))
}

/// Convenience for tests and the acceptance suite.
pub fn spec_for(cfg: &SweepConfig, eps: f64, delta: f64) -> Result<ModelSpec> {
    let mut mc = cfg.model.clone();
    mc.eps = eps;
    mc.delta = delta;
    instantiate_model(&mc)
}
