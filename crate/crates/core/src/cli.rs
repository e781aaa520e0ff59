//! Command-line entry point: strict TOML experiment configs, four
//! subcommands (predict / simulate / validate / sweep), deterministic
//! seeded output, and a fixed exit-code contract:
//!
//! * 0 - success
//! * 2 - configuration error (parse failure, unknown key, invalid value)
//! * 3 - solver non-convergence (the report is still written)
//! * 4 - exact oracle infeasible for the requested dimensions
//! * 1 - anything else, including validation z-scores over threshold

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::channels::NetworkSpec;
use crate::error::{Error, Result};
use crate::math::KahanSum;
use crate::metrics::{run_sweep, SweepAxis, SweepRow, SweepSpec};
use crate::replica_solver::{solve, FixedPointResult, InitStyle, SolverOptions};
use crate::simulator::{
    decoupling_moment_test, run_trials, DecouplingReport, OracleKind, TrialBatch, TrialSettings,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED_CHECK: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NO_CONVERGENCE: i32 = 3;
pub const EXIT_ORACLE_INFEASIBLE: i32 = 4;

// ---------------------------------------------------------------------------
// Config schema
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed; all randomness in a run flows from it.
    #[serde(default)]
    pub seed: u64,
    /// Worker threads for trial fan-out; 1 keeps everything on one thread.
    #[serde(default = "default_threads")]
    pub threads: usize,
    pub network: NetworkSpec,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputConfig>,
}

fn default_threads() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_damping")]
    pub damping: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_grid_order")]
    pub grid_order: usize,
    #[serde(default)]
    pub init: InitConfig,
}

fn default_damping() -> f64 {
    0.5
}
fn default_tol() -> f64 {
    1e-9
}
fn default_max_iter() -> usize {
    2000
}
fn default_grid_order() -> usize {
    crate::quadrature::DEFAULT_ORDER
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            damping: default_damping(),
            tol: default_tol(),
            max_iter: default_max_iter(),
            grid_order: default_grid_order(),
            init: InitConfig::Cold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitConfig {
    #[default]
    Cold,
    MultiStart,
    Warm(Vec<f64>),
}

impl SolverConfig {
    pub fn to_options(&self) -> SolverOptions {
        SolverOptions {
            damping: self.damping,
            tol: self.tol,
            max_iter: self.max_iter,
            grid_order: self.grid_order,
            init_style: match &self.init {
                InitConfig::Cold => InitStyle::Cold,
                InitConfig::MultiStart => InitStyle::MultiStart(Vec::new()),
                InitConfig::Warm(d) => InitStyle::Warm(d.clone()),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    /// Stage dimensions N_1..N_{L+1}.
    pub dims: Vec<usize>,
    pub n_trials: usize,
    #[serde(default = "default_oracle")]
    pub oracle: OracleKind,
    #[serde(default = "default_true")]
    pub redraw_matrices: bool,
    /// Joint moments (i, j) compared by `validate`.
    #[serde(default = "default_moments")]
    pub moments: Vec<(u32, u32)>,
    /// `validate` passes when every |z| stays at or under this.
    #[serde(default = "default_z_threshold")]
    pub z_threshold: f64,
}

fn default_oracle() -> OracleKind {
    OracleKind::BruteForce
}
fn default_true() -> bool {
    true
}
fn default_moments() -> Vec<(u32, u32)> {
    vec![(1, 1), (0, 2), (2, 0), (2, 2)]
}
fn default_z_threshold() -> f64 {
    4.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    #[default]
    Csv,
    Pretty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub format: OutputFormat,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.solver.to_options().validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

// ---------------------------------------------------------------------------
// Argument parsing
// ---------------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(
    name = "mlglm",
    about = "Fixed-point performance predictions and Monte Carlo validation for MMSE estimation in multi-layer GLMs"
)]
struct CliArgs {
    #[command(subcommand)]
    command: CliCommand,
}

#[derive(Debug, Subcommand)]
enum CliCommand {
    /// Solve the fixed-point equations and report eta, avg MSE, and the
    /// per-layer order parameters.
    Predict(RunArgs),
    /// Run Monte Carlo trials with an exact oracle and emit trial-level CSV.
    Simulate(RunArgs),
    /// Compare empirical joint moments against the scalar-channel
    /// predictions; exits nonzero when a z-score exceeds the threshold.
    Validate(RunArgs),
    /// Solve along a parameter axis and emit one row per point.
    Sweep(RunArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output file; overrides the config's output.path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; overrides the config.
    #[arg(long)]
    threads: Option<usize>,
    /// Quadrature order; overrides the config.
    #[arg(long)]
    grid_order: Option<usize>,
    /// Root seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
}

impl RunArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::from_path(&self.config)?;
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        if let Some(g) = self.grid_order {
            cfg.solver.grid_order = g;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(out) = &self.out {
            let output = cfg.output.get_or_insert(OutputConfig {
                path: None,
                format: OutputFormat::Csv,
            });
            output.path = Some(out.clone());
        }
        Ok(cfg)
    }
}

/// Parses argv and runs; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args = match CliArgs::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) => {
            // clap handles --help/--version printing itself.
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let outcome = match &args.command {
        CliCommand::Predict(a) => a.load().and_then(cmd_predict),
        CliCommand::Simulate(a) => a.load().and_then(cmd_simulate),
        CliCommand::Validate(a) => a.load().and_then(cmd_validate),
        CliCommand::Sweep(a) => a.load().and_then(cmd_sweep),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidInput(_) | Error::OrderOutOfRange(_) => EXIT_CONFIG,
        Error::NonConvergence { .. } => EXIT_NO_CONVERGENCE,
        Error::OracleInfeasible { .. } => EXIT_ORACLE_INFEASIBLE,
        _ => EXIT_FAILED_CHECK,
    }
}

fn write_output(cfg: &ExperimentConfig, content: &str) -> Result<()> {
    match cfg.output.as_ref().and_then(|o| o.path.as_ref()) {
        Some(path) => {
            let mut f = std::fs::File::create(path)?;
            f.write_all(content.as_bytes())?;
            Ok(())
        }
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn output_format(cfg: &ExperimentConfig) -> OutputFormat {
    cfg.output.as_ref().map(|o| o.format).unwrap_or_default()
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

fn predict_csv(net: &NetworkSpec, r: &FixedPointResult) -> String {
    let mut s = String::from("layer,alpha,t_x,d,q,d_tilde,eta,avg_mse,iterations,converged\n");
    for i in 0..r.state.depth() {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            i + 1,
            net.layers()[i].alpha,
            r.state.t_x[i],
            r.state.d[i],
            r.state.q[i],
            r.state.d_tilde[i],
            r.eta,
            r.avg_mse,
            r.iterations,
            r.converged
        );
    }
    s
}

fn predict_pretty(net: &NetworkSpec, r: &FixedPointResult) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "eta        = {:.12e}", r.eta);
    let _ = writeln!(s, "avg_mse    = {:.12e}", r.avg_mse);
    let _ = writeln!(s, "iterations = {}", r.iterations);
    let _ = writeln!(s, "residual   = {:.3e}", r.residual);
    let _ = writeln!(s, "converged  = {}", r.converged);
    let _ = writeln!(
        s,
        "{:>5} {:>10} {:>14} {:>14} {:>14} {:>14}",
        "layer", "alpha", "t_x", "d", "q", "d_tilde"
    );
    for i in 0..r.state.depth() {
        let _ = writeln!(
            s,
            "{:>5} {:>10} {:>14.8e} {:>14.8e} {:>14.8e} {:>14.8e}",
            i + 1,
            net.layers()[i].alpha,
            r.state.t_x[i],
            r.state.d[i],
            r.state.q[i],
            r.state.d_tilde[i]
        );
    }
    if !r.all_solutions.is_empty() {
        let _ = writeln!(s, "fixed points found: {}", r.all_solutions.len());
        for (k, (state, mse)) in r.all_solutions.iter().enumerate() {
            let _ = writeln!(
                s,
                "  solution {}: avg_mse = {:.12e}, eta = {:.12e}",
                k + 1,
                mse,
                0.5 / state.d_tilde[0]
            );
        }
    }
    s
}

fn cmd_predict(cfg: ExperimentConfig) -> Result<i32> {
    let opts = cfg.solver.to_options();
    let r = solve(&cfg.network, &opts)?;
    // The summary always goes to stdout; CSV goes to the output target.
    print!("{}", predict_pretty(&cfg.network, &r));
    if cfg.output.is_some() {
        match output_format(&cfg) {
            OutputFormat::Csv => write_output(&cfg, &predict_csv(&cfg.network, &r))?,
            OutputFormat::Pretty => write_output(&cfg, &predict_pretty(&cfg.network, &r))?,
        }
    }
    Ok(if r.converged {
        EXIT_OK
    } else {
        eprintln!(
            "error: no convergence after {} iterations (residual {:.3e})",
            r.iterations, r.residual
        );
        EXIT_NO_CONVERGENCE
    })
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

fn simulate_csv(batch: &TrialBatch) -> String {
    let mut s = String::from("trial,mse,m11,m02,m20,m22\n");
    for (t, rec) in batch.records.iter().enumerate() {
        let k = rec.x0.len() as f64;
        let mut mse = KahanSum::new();
        let mut m11 = KahanSum::new();
        let mut m02 = KahanSum::new();
        let mut m20 = KahanSum::new();
        let mut m22 = KahanSum::new();
        for (x, xh) in rec.x0.iter().zip(&rec.xhat) {
            mse.add((x - xh) * (x - xh));
            m11.add(x * xh);
            m02.add(xh * xh);
            m20.add(x * x);
            m22.add(x * x * xh * xh);
        }
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            t,
            mse.value() / k,
            m11.value() / k,
            m02.value() / k,
            m20.value() / k,
            m22.value() / k
        );
    }
    s
}

fn cmd_simulate(cfg: ExperimentConfig) -> Result<i32> {
    let sim = cfg
        .simulate
        .as_ref()
        .ok_or_else(|| Error::Config("simulate requires a [simulate] section".into()))?;
    let settings = TrialSettings {
        n_trials: sim.n_trials,
        seed: cfg.seed,
        redraw_matrices: sim.redraw_matrices,
        oracle: sim.oracle,
        threads: cfg.threads,
    };
    let batch = run_trials(&cfg.network, &sim.dims, &settings)?;
    let n = batch.records.len();
    let mut total = KahanSum::new();
    for rec in &batch.records {
        let k = rec.x0.len() as f64;
        let mut mse = KahanSum::new();
        for (x, xh) in rec.x0.iter().zip(&rec.xhat) {
            mse.add((x - xh) * (x - xh));
        }
        total.add(mse.value() / k);
    }
    println!("trials      = {n}");
    println!("oracle      = {:?}", batch.oracle_kind);
    if n > 0 {
        println!("avg_mse     = {:.12e}", total.value() / n as f64);
    }
    write_output(&cfg, &simulate_csv(&batch))?;
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------------------
// validate
// ---------------------------------------------------------------------------

fn validate_csv(report: &DecouplingReport) -> String {
    let mut s = String::from("i,j,empirical,std_error,predicted,z_score\n");
    for row in &report.rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            row.i, row.j, row.empirical, row.std_error, row.predicted, row.z_score
        );
    }
    s
}

fn validate_pretty(report: &DecouplingReport, threshold: f64) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "trials       = {}", report.n_trials);
    let _ = writeln!(s, "oracle       = {:?}", report.oracle_kind);
    let _ = writeln!(s, "eta          = {:.12e}", report.fixed_point.eta);
    let _ = writeln!(s, "avg_mse pred = {:.12e}", report.fixed_point.avg_mse);
    let _ = writeln!(
        s,
        "avg_mse emp  = {:.12e} (se {:.3e})",
        report.empirical_mse, report.empirical_mse_std_error
    );
    let _ = writeln!(
        s,
        "{:>3} {:>3} {:>16} {:>12} {:>16} {:>9}  pass(|z|<={:.1})",
        "i", "j", "empirical", "std_error", "predicted", "z", threshold
    );
    for row in &report.rows {
        let _ = writeln!(
            s,
            "{:>3} {:>3} {:>16.9e} {:>12.3e} {:>16.9e} {:>9.3} {}",
            row.i,
            row.j,
            row.empirical,
            row.std_error,
            row.predicted,
            row.z_score,
            if row.z_score.abs() <= threshold {
                "ok"
            } else {
                "FAIL"
            }
        );
    }
    s
}

fn cmd_validate(cfg: ExperimentConfig) -> Result<i32> {
    let sim = cfg
        .simulate
        .as_ref()
        .ok_or_else(|| Error::Config("validate requires a [simulate] section".into()))?;
    if sim.n_trials < 2 {
        return Err(Error::Config(
            "validate needs n_trials >= 2 for standard errors".into(),
        ));
    }
    let settings = TrialSettings {
        n_trials: sim.n_trials,
        seed: cfg.seed,
        redraw_matrices: sim.redraw_matrices,
        oracle: sim.oracle,
        threads: cfg.threads,
    };
    let report = decoupling_moment_test(
        &cfg.network,
        &sim.dims,
        &settings,
        &sim.moments,
        &cfg.solver.to_options(),
    )?;
    print!("{}", validate_pretty(&report, sim.z_threshold));
    if cfg.output.is_some() {
        match output_format(&cfg) {
            OutputFormat::Csv => write_output(&cfg, &validate_csv(&report))?,
            OutputFormat::Pretty => write_output(&cfg, &validate_pretty(&report, sim.z_threshold))?,
        }
    }
    let all_ok = report
        .rows
        .iter()
        .all(|r| r.z_score.abs() <= sim.z_threshold);
    Ok(if all_ok { EXIT_OK } else { EXIT_FAILED_CHECK })
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("axis,eta,avg_mse,ser,iterations,converged\n");
    for r in rows {
        let ser = r.ser.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.axis_value, r.eta, r.avg_mse, ser, r.iterations, r.converged
        );
    }
    s
}

fn sweep_pretty(rows: &[SweepRow]) -> String {
    let mut s = format!(
        "{:>12} {:>14} {:>14} {:>12} {:>10} {:>9}\n",
        "axis", "eta", "avg_mse", "ser", "iters", "converged"
    );
    for r in rows {
        let ser = r
            .ser
            .map(|v| format!("{v:.6e}"))
            .unwrap_or_else(|| "-".into());
        let _ = writeln!(
            s,
            "{:>12.6} {:>14.8e} {:>14.8e} {:>12} {:>10} {:>9}",
            r.axis_value, r.eta, r.avg_mse, ser, r.iterations, r.converged
        );
    }
    s
}

fn cmd_sweep(cfg: ExperimentConfig) -> Result<i32> {
    let sc = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| Error::Config("sweep requires a [sweep] section".into()))?;
    let sweep = SweepSpec {
        axis: sc.axis.clone(),
        values: sc.values.clone(),
        base: cfg.network.clone(),
    };
    let rows = run_sweep(&sweep, &cfg.solver.to_options(), cfg.threads)?;
    match output_format(&cfg) {
        OutputFormat::Csv => write_output(&cfg, &sweep_csv(&rows))?,
        OutputFormat::Pretty => write_output(&cfg, &sweep_pretty(&rows))?,
    }
    Ok(if rows.iter().all(|r| r.converged) {
        EXIT_OK
    } else {
        EXIT_NO_CONVERGENCE
    })
}
