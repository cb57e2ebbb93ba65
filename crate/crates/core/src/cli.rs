//! Command-line front end: load a market, run one computation, print a
//! machine-readable report.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::dual::{best_candidate, dual_ascent, extract_cps, robust_entropy};
use crate::error::{Error, Result};
use crate::lift::{build_lift, dump_lift_json, LiftedTree};
use crate::market::{check_na2, load_market, MarketSpec};
use crate::pricing::{
    gamma_sweep, indifference_price_with, log_value, property_suite, superhedge_price, sweep_csv, zero_claim,
};
use crate::primal::{backward_induction, extract_strategy, log_claim, optimize_static, Payoff, Statics};
use crate::solvers::SolverConfig;

pub const DEFAULT_SWEEP: [f64; 7] = [1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    /// Validate the market and certify NA₂ with a strict consistent price system.
    Check,
    /// Robust utility value, optimal static positions and the replayed strategy.
    Value,
    /// Dual objective, duality gap and the consistent price system.
    Dual,
    /// Indifference prices for each γ.
    Indiff,
    /// Superhedging price (domination and martingale LPs).
    Superhedge,
    /// γ-sweep of indifference prices with shortfall statistics.
    Sweep,
    /// Property suite of the indifference price.
    Props,
}

#[derive(Debug, Parser)]
#[command(name = "entropic-hedge", version, about = "Robust exponential-utility hedging under transaction costs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Market specification (JSON).
    #[arg(long, global = true)]
    pub input: Option<PathBuf>,
    /// Report destination (stdout when omitted).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json", global = true)]
    pub format: Format,
    /// Comma-separated risk aversions.
    #[arg(long, value_delimiter = ',', global = true)]
    pub gamma: Vec<f64>,
    /// θ-grid points per risky coordinate.
    #[arg(long = "grid-m", default_value_t = 3, global = true)]
    pub grid_m: usize,
    /// Gradient-norm tolerance of the smooth solvers
    #[arg(long = "tol-grad", global = true)]
    pub tol_grad: Option<f64>,
    /// Duality-gap tolerance of the barrier method
    #[arg(long = "tol-barrier-gap", global = true)]
    pub tol_barrier_gap: Option<f64>,
    /// Simplex pivot tolerance
    #[arg(long = "tol-lp-pivot", global = true)]
    pub tol_lp_pivot: Option<f64>,
    /// Convergence tolerance of KL projections
    #[arg(long = "tol-kl", global = true)]
    pub tol_kl: Option<f64>,
    /// Iteration cap of the smooth solvers
    #[arg(long = "max-iter", global = true)]
    pub max_iter: Option<usize>,
    /// Write the lifted tree as JSON.
    #[arg(long = "dump-lift", global = true)]
    pub dump_lift: Option<PathBuf>,
    /// Write the best dual measure and its price system as JSON.
    #[arg(long = "dump-dual", global = true)]
    pub dump_dual: Option<PathBuf>,
    /// Seed for randomized property checks.
    #[arg(long, default_value_t = 0, global = true)]
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub command: Command,
    pub input: PathBuf,
    pub format: Format,
    pub gamma: Vec<f64>,
    pub grid_m: usize,
    pub seed: u64,
    pub solver: SolverConfig,
}

impl Cli {
    pub fn config(&self) -> Result<RunConfig> {
        let input = self.input.clone().ok_or_else(|| Error::InvalidArgument("--input is required".into()))?;
        let mut solver = SolverConfig::default();
        if let Some(v) = self.tol_grad {
            solver.grad_tol = v;
        }
        if let Some(v) = self.tol_barrier_gap {
            solver.barrier_gap = v;
        }
        if let Some(v) = self.tol_lp_pivot {
            solver.lp_pivot_tol = v;
        }
        if let Some(v) = self.tol_kl {
            solver.kl_tol = v;
        }
        if let Some(v) = self.max_iter {
            solver.max_iter = v;
        }
        solver.validate()?;
        if self.grid_m < 2 {
            return Err(Error::InvalidArgument(format!("--grid-m must be at least 2, got {}", self.grid_m)));
        }
        if self.gamma.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
            return Err(Error::InvalidArgument("--gamma values must be positive".into()));
        }
        let csv_ok = matches!(self.command, Command::Indiff | Command::Sweep | Command::Props);
        if self.format == Format::Csv && !csv_ok {
            return Err(Error::InvalidArgument("csv output is available for indiff, sweep and props".into()));
        }
        Ok(RunConfig {
            command: self.command,
            input,
            format: self.format,
            gamma: self.gamma.clone(),
            grid_m: self.grid_m,
            seed: self.seed,
            solver,
        })
    }
}

/// Successful run: report text, plus an error to signal after printing it.
struct Outcome {
    text: String,
    breach: Option<Error>,
}

fn node_map(spec: &MarketSpec, values: &[Vec<f64>]) -> Value {
    let mut m = serde_json::Map::new();
    for (k, v) in values.iter().enumerate() {
        if !v.is_empty() && v.iter().all(|x| x.is_finite()) {
            m.insert(spec.tree.nodes[k].id.clone(), json!(v));
        }
    }
    Value::Object(m)
}

fn envelope(cfg: &RunConfig, spec: &MarketSpec, result: Value) -> String {
    let report = json!({
        "command": cfg.command,
        "spec_hash": spec.hash(),
        "config": cfg,
        "result": result,
    });
    let mut s = serde_json::to_string_pretty(&report).expect("report serializes");
    s.push('\n');
    s
}

fn write_json(path: &PathBuf, value: &Value) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("dump serializes");
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

fn gammas_or(cfg: &RunConfig, default: &[f64]) -> Vec<f64> {
    if cfg.gamma.is_empty() {
        default.to_vec()
    } else {
        cfg.gamma.clone()
    }
}

fn execute(cli: &Cli, cfg: &RunConfig) -> Result<Outcome> {
    let spec = load_market(&cfg.input)?;
    let na2 = check_na2(&spec, cfg.solver.lp_pivot_tol)?;
    if cfg.command == Command::Check {
        let text = envelope(cfg, &spec, serde_json::to_value(&na2).expect("serializable"));
        let breach = if na2.holds { None } else { na2.into_result().err() };
        return Ok(Outcome { text, breach });
    }
    na2.into_result()?;
    let lift = build_lift(&spec, cfg.grid_m)?;
    if let Some(path) = &cli.dump_lift {
        write_json(path, &dump_lift_json(&spec, &lift))?;
    }
    let solver = &cfg.solver;
    let claim = spec.claims.endowment.clone();
    let mut breach = None;
    let text = match cfg.command {
        Command::Check => unreachable!(),
        Command::Value => {
            let spec = match cfg.gamma.first() {
                Some(&g) => spec.with_gamma(g),
                None => spec,
            };
            let v = optimize_static(&spec, &lift, &claim, solver)?;
            let ex = extract_strategy(&spec, &lift, &v.fields, solver, 1e-6)?;
            envelope(
                cfg,
                &spec,
                json!({
                    "gamma": spec.claims.gamma,
                    "log_value": v.log_value,
                    "utility": v.utility,
                    "static_positions": v.ell,
                    "strategy": node_map(&spec, &ex.h),
                    "replay_value": ex.replay_value,
                    "root_value": v.fields.root_value,
                    "gap_bound": v.fields.gap_bound,
                }),
            )
        }
        Command::Dual => {
            let gamma = cfg.gamma.first().copied().unwrap_or(spec.claims.gamma);
            let phi = log_claim(&claim, gamma);
            let fields = backward_induction(&spec, &lift, &Payoff::Claim(phi.clone()), &Statics::Optimize, solver)?;
            let (gibbs, mut best) = best_candidate(&spec, &lift, &fields, &phi, solver);
            let mut ascent = None;
            if spec.num_options() == 0 {
                let cps = extract_cps(&spec, &best, solver);
                let a = dual_ascent(&spec, &lift, &phi, (&cps.cond, &cps.z), solver, 500);
                if a.objective > gibbs {
                    best = a.measure.clone();
                }
                ascent = Some(a.objective);
            }
            let objective = gibbs.max(ascent.unwrap_or(f64::NEG_INFINITY));
            let gap = fields.log_value - objective;
            let tol = 1e-4 * fields.log_value.abs().max(1.0);
            let cps = extract_cps(&spec, &best, solver);
            let lifted_entropy = robust_entropy(&spec, &best, solver, None).value;
            if let Some(path) = &cli.dump_dual {
                write_json(path, &json!({ "spec_hash": spec.hash(), "measure": best, "cps": cps }))?;
            }
            if gap.abs() > tol {
                breach = Some(Error::SolverTolerance(format!("duality gap {gap:e} exceeds {tol:e}")));
            }
            envelope(
                cfg,
                &spec,
                json!({
                    "gamma": gamma,
                    "primal_log_value": fields.log_value,
                    "gibbs_objective": gibbs,
                    "ascent_objective": ascent,
                    "dual_objective": objective,
                    "gap": gap,
                    "gap_tolerance": tol,
                    "cps": {
                        "z": node_map(&spec, &cps.z),
                        "mass": cps.mass,
                        "base_entropy": cps.base_entropy,
                        "lifted_entropy": lifted_entropy,
                        "martingale_residual": cps.martingale_residual(&spec),
                        "boundary_distance": cps.boundary_distance,
                    },
                }),
            )
        }
        Command::Indiff => {
            let gammas = gammas_or(cfg, &[spec.claims.gamma]);
            let zero = log_value(&spec, &lift, &zero_claim(&spec), solver)?.log_value;
            let rows = gammas
                .iter()
                .map(|&g| indifference_price_with(&spec, &lift, &claim, g, zero, solver))
                .collect::<Result<Vec<_>>>()?;
            match cfg.format {
                Format::Csv => {
                    let mut s = String::from("gamma,pi_gamma,log_claim,log_zero\n");
                    for r in &rows {
                        s.push_str(&format!("{},{:.12e},{:.12e},{:.12e}\n", r.gamma, r.price, r.log_claim, r.log_zero));
                    }
                    s
                }
                Format::Json => envelope(cfg, &spec, json!({ "prices": rows })),
            }
        }
        Command::Superhedge => {
            let corners = build_lift(&spec, 2)?;
            let sh = superhedge_price(&spec, &corners, &claim, solver, 1e-7)?;
            if let Some(path) = &cli.dump_dual {
                write_json(path, &json!({ "spec_hash": spec.hash(), "measure": sh.measure }))?;
            }
            envelope(
                cfg,
                &spec,
                json!({
                    "price": sh.price,
                    "martingale_price": sh.martingale_price,
                    "static_positions": sh.ell,
                    "strategy": node_map(&spec, &sh.h),
                }),
            )
        }
        Command::Sweep => {
            let gammas = gammas_or(cfg, &DEFAULT_SWEEP);
            let corners = corner_lift(&spec, &lift)?;
            let rep = gamma_sweep(&spec, &lift, &corners, &claim, &gammas, solver)?;
            if !rep.violations.is_empty() {
                breach = Some(Error::SolverTolerance(rep.violations.join("; ")));
            }
            match cfg.format {
                Format::Csv => sweep_csv(&rep)?,
                Format::Json => envelope(cfg, &spec, serde_json::to_value(&rep).expect("serializable")),
            }
        }
        Command::Props => {
            let gamma = cfg.gamma.first().copied().unwrap_or(spec.claims.gamma);
            let checks = property_suite(&spec, &lift, &claim, gamma, cfg.seed, 20, solver)?;
            let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
            if !failed.is_empty() {
                breach = Some(Error::SolverTolerance(format!("property checks failed: {}", failed.join(", "))));
            }
            match cfg.format {
                Format::Csv => {
                    let mut s = String::from("property,passed,worst,tolerance\n");
                    for c in &checks {
                        s.push_str(&format!("{},{},{:.6e},{:e}\n", c.name, c.passed, c.worst, c.tolerance));
                    }
                    s
                }
                Format::Json => envelope(cfg, &spec, json!({ "gamma": gamma, "checks": checks })),
            }
        }
    };
    Ok(Outcome { text, breach })
}

fn corner_lift(spec: &MarketSpec, lift: &LiftedTree) -> Result<LiftedTree> {
    if lift.grid.m == 2 {
        Ok(lift.clone())
    } else {
        build_lift(spec, 2)
    }
}

fn report_error<E: Write>(err: &mut E, e: &Error) -> i32 {
    let code = e.exit_code();
    let _ = writeln!(err, "error: {e}");
    let obj = json!({ "error": { "kind": e.kind(), "message": e.to_string(), "exit_code": code } });
    let _ = writeln!(err, "{obj}");
    code
}

/// Runs the command line and returns the process exit code.
pub fn run_with<I, T, O, E>(args: I, out: &mut O, err: &mut E) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
    O: Write,
    E: Write,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = write!(if code == 0 { out as &mut dyn Write } else { err as &mut dyn Write }, "{e}");
            return code;
        }
    };
    let result = cli.config().and_then(|cfg| {
        let outcome = execute(&cli, &cfg)?;
        match &cli.out {
            Some(path) => std::fs::write(path, &outcome.text)?,
            None => out.write_all(outcome.text.as_bytes())?,
        }
        Ok(outcome.breach)
    });
    match result {
        Ok(None) => 0,
        Ok(Some(e)) | Err(e) => report_error(err, &e),
    }
}

pub fn run() -> i32 {
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(std::env::args_os(), &mut stdout.lock(), &mut stderr.lock())
}
