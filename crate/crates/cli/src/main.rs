//! `mm` — multiscale Merton asymptotics CLI.
//!
//! Subcommands:
//! * `sweep` — run an epsilon/delta ladder against an oracle and emit
//!   CSV/JSON reports plus a plot-ready log-log file.
//! * `verify-subsuper` — calibrate the sandwich constants and print the
//!   verification report as JSON (exit code 2 on failure).
//! * `simulate` — Monte Carlo value of the zeroth-order strategy.
//! * `merton` — closed-form Merton point values for power utility.
//!
//! Exit codes: 0 success, 2 verification failure, 3 config error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mm_core::error::CoreError;
use mm_core::harness::{self, fmt12, sig12, SweepConfig};
use mm_core::merton::{merton_residual, solve_merton};
use mm_core::utility::UtilitySpec;

#[derive(Parser)]
#[command(name = "mm", about = "Multiscale Merton portfolio asymptotics", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an accuracy sweep over the epsilon ladder.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for report.csv / report.json / slope.dat.
        #[arg(long)]
        out: PathBuf,
    },
    /// Calibrate constants and verify the sub/super-solution sandwich.
    VerifySubsuper {
        #[arg(long)]
        config: PathBuf,
        /// Override [verify] eps.
        #[arg(long)]
        eps: Option<f64>,
        /// Override [verify] delta.
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Monte Carlo estimate of E[U(X_T)] under the zeroth-order strategy.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        paths: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Closed-form Merton value for power utility.
    Merton {
        #[arg(long)]
        gamma: f64,
        #[arg(long)]
        lambda: f64,
        #[arg(long = "T")]
        horizon: f64,
        #[arg(long, default_value_t = 0.0)]
        t: f64,
        #[arg(long, default_value_t = 1.0)]
        x: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e.downcast_ref::<CoreError>() {
                Some(CoreError::Config(_))
                | Some(CoreError::InvalidModel(_))
                | Some(CoreError::InvalidUtility(_))
                | Some(CoreError::InvalidCorrelation(_))
                | Some(CoreError::UnknownCatalog(_))
                | Some(CoreError::Io(_)) => 3,
                Some(CoreError::CalibrationCap { .. }) => 2,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}

fn load_config(path: &PathBuf) -> anyhow::Result<SweepConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CoreError::Config(format!("cannot read {}: {e}", path.display())))?;
    Ok(SweepConfig::from_toml(&text)?)
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Sweep { config, out } => {
            let cfg = load_config(&config)?;
            let report = harness::run_sweep(&cfg)?;
            harness::emit_report(&report, &out)?;
            match (report.slope, report.degenerate_zero_error) {
                (Some(s), _) => println!(
                    "slope {} +- {}",
                    fmt12(s),
                    fmt12(report.slope_stderr.unwrap_or(0.0))
                ),
                (None, true) => println!("degenerate: zero error"),
                (None, false) => println!("slope fit skipped"),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::VerifySubsuper { config, eps, delta } => {
            let mut cfg = load_config(&config)?;
            if let (Some(e), Some(d)) = (eps, delta) {
                cfg.verify = Some(harness::VerifyTable { eps: e, delta: d });
            } else if let Some(v) = cfg.verify.as_mut() {
                if let Some(e) = eps {
                    v.eps = e;
                }
                if let Some(d) = delta {
                    v.delta = d;
                }
            }
            match harness::run_verify(&cfg) {
                Ok(mut rep) => {
                    rep.min_q_sub = sig12(rep.min_q_sub);
                    rep.max_q_super = sig12(rep.max_q_super);
                    rep.sub_terminal_margin = sig12(rep.sub_terminal_margin);
                    rep.super_terminal_margin = sig12(rep.super_terminal_margin);
                    rep.concavity_margin = sig12(rep.concavity_margin);
                    rep.sandwich_min = sig12(rep.sandwich_min);
                    rep.gap_over_eps_plus_delta = sig12(rep.gap_over_eps_plus_delta);
                    println!("{}", serde_json::to_string_pretty(&rep)?);
                    Ok(ExitCode::SUCCESS)
                }
                Err(CoreError::CalibrationCap { cap_log2, eps, delta, binding }) => {
                    println!(
                        "{}",
                        serde_json::json!({
                            "pass": false,
                            "eps": eps,
                            "delta": delta,
                            "diagnostic": format!(
                                "eps/delta too large for verification: no constant up to 2^{cap_log2} works; binding: {binding}"
                            ),
                        })
                    );
                    Ok(ExitCode::from(2))
                }
                Err(e) => Err(e.into()),
            }
        }
        Command::Simulate { config, paths, steps, seed } => {
            let cfg = load_config(&config)?;
            let mc = cfg
                .mc
                .as_ref()
                .ok_or_else(|| CoreError::Config("missing [mc] table".into()))?;
            let overrides = (
                paths.unwrap_or(mc.n_paths),
                steps.unwrap_or(mc.n_steps),
                seed.unwrap_or(mc.seed),
            );
            let (mean, ci, sim) = harness::run_simulate(&cfg, Some(overrides))?;
            println!(
                "{}",
                serde_json::json!({
                    "mean": sig12(mean),
                    "ci": sig12(ci),
                    "n_paths": sim.n_paths,
                    "n_steps": sim.n_steps,
                    "seed": sim.seed,
                })
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Merton { gamma, lambda, horizon, t, x } => {
            let u = UtilitySpec::power(gamma).map_err(CoreError::from)?;
            let field = solve_merton(&u, lambda, horizon, &[t])?;
            let e = field.eval(t, x, lambda);
            let residual = merton_residual(&field, t.max(1e-9), x, lambda)?;
            println!(
                "{}",
                serde_json::json!({
                    "gamma": gamma,
                    "lambda": lambda,
                    "T": horizon,
                    "t": t,
                    "x": x,
                    "m": sig12(e.m),
                    "m_x": sig12(e.m_x),
                    "m_xx": sig12(e.m_xx),
                    "r": sig12(e.r),
                    "pde_residual": sig12(residual),
                })
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}
