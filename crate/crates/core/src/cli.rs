//! Command-line front end: `run`, `compare` and `validate`.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{error, info, warn};
use serde::Serialize;

use crate::config::{load, EffectiveConfig, LoadedConfig, Overrides};
use crate::controllers::ControllerKind;
use crate::error::{Result, SpreaderError};
use crate::simulation::{self, RunFailure, RunRecord};
use crate::spread::DepositScaling;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_PARTIAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "spreader", version, about = "Fertilizer spreader simulation and control")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one closed-loop experiment.
    Run(CommonArgs),
    /// Run several controllers on the same scenario.
    Compare(CompareArgs),
    /// Check the configuration files and print the effective configuration.
    Validate(CommonArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ControllerArg {
    Greedy,
    MpcTriangle,
    MpcFull,
}

impl From<ControllerArg> for ControllerKind {
    fn from(c: ControllerArg) -> Self {
        match c {
            ControllerArg::Greedy => ControllerKind::Greedy,
            ControllerArg::MpcTriangle => ControllerKind::MpcTriangle,
            ControllerArg::MpcFull => ControllerKind::MpcFull,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScalingArg {
    Literal,
    Conservative,
}

impl From<ScalingArg> for DepositScaling {
    fn from(s: ScalingArg) -> Self {
        match s {
            ScalingArg::Literal => DepositScaling::Literal,
            ScalingArg::Conservative => DepositScaling::Conservative,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    #[arg(long, default_value = "configs/scenario.toml")]
    pub scenario: PathBuf,
    #[arg(long, default_value = "configs/calibration.toml")]
    pub calibration: PathBuf,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub controller: Option<ControllerArg>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long, value_enum)]
    pub scaling: Option<ScalingArg>,
    /// Worker threads, 0 = one per core.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Seed for multi-start restarts.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Random restarts per optimization.
    #[arg(long)]
    pub multi_start: Option<usize>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    #[arg(long, short)]
    pub verbose: bool,
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            controller: self.controller.map(Into::into),
            horizon: self.horizon,
            scaling: self.scaling.map(Into::into),
            threads: self.threads,
            seed: self.seed,
            multi_start: self.multi_start,
            max_iterations: self.max_iterations,
            verbose: self.verbose,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Comma-separated controllers to compare (default: all three).
    #[arg(long)]
    pub only: Option<String>,
}

fn exit_code(e: &SpreaderError) -> i32 {
    match e {
        SpreaderError::Numerical { .. }
        | SpreaderError::InfeasibleSchedule { .. }
        | SpreaderError::Internal(_) => EXIT_NUMERICAL,
        _ => EXIT_CONFIG,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match cli.command {
        Command::Run(a) => cmd_run(&a),
        Command::Compare(a) => cmd_compare(&a),
        Command::Validate(a) => cmd_validate(&a),
    }
}

fn init_logging(verbose: bool) {
    let level = if verbose { "debug" } else { "info" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

fn init_threads(threads: usize) {
    if threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            warn!("thread pool already initialised: {e}");
        }
    }
}

fn prepare(args: &CommonArgs) -> std::result::Result<LoadedConfig, i32> {
    let loaded = load(&args.scenario, &args.calibration, &args.overrides()).map_err(|e| {
        eprintln!("error: {e}");
        exit_code(&e)
    })?;
    init_logging(loaded.effective.scenario.run.verbose);
    init_threads(loaded.effective.scenario.run.threads);
    Ok(loaded)
}

fn warn_ignored_horizon(args: &CommonArgs, kind: ControllerKind) {
    if kind == ControllerKind::Greedy {
        if let Some(h) = args.horizon.filter(|&h| h != 1) {
            let msg = format!("--horizon {h} ignored: greedy always uses a one-step horizon");
            eprintln!("warning: {msg}");
            warn!("{msg}");
        }
    }
}

pub fn cmd_validate(args: &CommonArgs) -> i32 {
    let loaded = match prepare(args) {
        Ok(l) => l,
        Err(code) => return code,
    };
    let s = &loaded.scenario;
    let steps: usize = match s.plan.steps_per_segment(s.dt) {
        Ok(v) => v.iter().sum(),
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    println!(
        "ok: N={} dt={} H={} steps={} controller={}",
        s.grid.n_cells, s.dt, s.horizon, steps, s.controller
    );
    match loaded.effective.to_toml() {
        Ok(t) => {
            print!("{t}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn cmd_run(args: &CommonArgs) -> i32 {
    let loaded = match prepare(args) {
        Ok(l) => l,
        Err(code) => return code,
    };
    warn_ignored_horizon(args, loaded.scenario.controller);
    let started = Instant::now();
    let result = simulation::run(
        &loaded.scenario,
        &loaded.calibration,
        &loaded.constraints,
        &loaded.settings,
    );
    let elapsed = started.elapsed().as_secs_f64();
    match write_outcome(&args.out, &loaded.effective, &result, elapsed) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    }
    match result {
        Ok(r) => {
            println!(
                "{}: final cost {} ({:.3} s controller time); outputs in {}",
                r.controller,
                r.final_cost,
                r.controller_seconds,
                args.out.display()
            );
            EXIT_OK
        }
        Err(f) => {
            eprintln!("error: {f}");
            eprintln!("diagnostics: {}", args.out.join("summary.toml").display());
            exit_code(&f.error)
        }
    }
}

fn parse_only(only: &Option<String>) -> std::result::Result<Vec<ControllerKind>, String> {
    let Some(list) = only else {
        return Ok(ControllerKind::ALL.to_vec());
    };
    let mut kinds = Vec::new();
    for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let kind = ControllerKind::parse(name).ok_or_else(|| {
            format!("--only: unknown controller '{name}' (expected greedy, mpc-triangle or mpc-full)")
        })?;
        if !kinds.contains(&kind) {
            kinds.push(kind);
        }
    }
    if kinds.is_empty() {
        return Err("--only: empty controller list".into());
    }
    Ok(kinds)
}

pub fn cmd_compare(args: &CompareArgs) -> i32 {
    let kinds = match parse_only(&args.only) {
        Ok(k) => k,
        Err(msg) => {
            eprintln!("error: {msg}");
            return EXIT_CONFIG;
        }
    };
    let common = &args.common;
    let loaded = match prepare(common) {
        Ok(l) => l,
        Err(code) => return code,
    };
    warn_ignored_horizon(common, if kinds.contains(&ControllerKind::Greedy) {
        ControllerKind::Greedy
    } else {
        kinds[0]
    });
    let scenarios: Vec<_> = kinds.iter().map(|&k| loaded.scenario.with_controller(k)).collect();
    let comparison = match simulation::compare(
        &scenarios,
        &loaded.calibration,
        &loaded.constraints,
        &loaded.settings,
    ) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };

    let mut rows = Vec::new();
    let mut first_error = None;
    for v in &comparison.variants {
        let mut effective = loaded.effective.clone();
        effective.scenario.run.controller = v.controller;
        let dir = common.out.join(v.controller.name());
        let seconds = match &v.result {
            Ok(r) => r.controller_seconds,
            Err(f) => f.partial.controller_seconds,
        };
        if let Err(e) = write_outcome(&dir, &effective, &v.result, seconds) {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
        match &v.result {
            Ok(r) => rows.push((v.controller, Some(r.final_cost), r.controller_seconds)),
            Err(f) => {
                eprintln!("error: {f}");
                first_error.get_or_insert(exit_code(&f.error));
                rows.push((v.controller, None, f.partial.controller_seconds));
            }
        }
    }
    if let Err(e) = write_comparison(&common.out.join("comparison.csv"), &rows) {
        eprintln!("error: {e}");
        return exit_code(&e);
    }
    for (rank, (kind, cost)) in comparison.ranking().iter().enumerate() {
        println!("{}. {kind}: final cost {cost}", rank + 1);
    }
    match first_error {
        None => EXIT_OK,
        Some(code) if comparison.failures() == comparison.variants.len() => code,
        Some(_) => EXIT_PARTIAL,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| SpreaderError::io(dir, e))
}

fn write_comparison(path: &Path, rows: &[(ControllerKind, Option<f64>, f64)]) -> Result<()> {
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| SpreaderError::parse(path, e.to_string()))?;
    let csv_err = |e: csv::Error| SpreaderError::parse(path, e.to_string());
    w.write_record(["controller", "final_cost", "wall_clock"]).map_err(csv_err)?;
    for (kind, cost, seconds) in rows {
        let cost = cost.map(|c| c.to_string()).unwrap_or_default();
        w.write_record([kind.name(), &cost, &seconds.to_string()]).map_err(csv_err)?;
    }
    w.flush().map_err(|e| SpreaderError::io(path, e))
}

/// Writes the per-step trace as CSV.
pub fn write_trace(path: &Path, record: &RunRecord) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| SpreaderError::parse(path, e.to_string()))?;
    let csv_err = |e: csv::Error| SpreaderError::parse(path, e.to_string());
    w.write_record([
        "k", "t", "x", "y", "phi", "D_l", "D_r", "rpm_l", "rpm_r", "deposit_mass", "cost",
    ])
    .map_err(csv_err)?;
    for s in &record.steps {
        let u = &s.controls;
        let fields = [
            s.t, s.pose.x, s.pose.y, s.pose.phi, u.d_left, u.d_right, u.rpm_left, u.rpm_right,
            s.deposit_mass, s.cost,
        ];
        let mut row = vec![s.k.to_string()];
        row.extend(fields.iter().map(f64::to_string));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| SpreaderError::io(path, e))
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    status: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    controller: &'a str,
    steps: usize,
    initial_cost: f64,
    final_cost: f64,
    controller_seconds: f64,
    wall_clock_seconds: f64,
    settings_hash: String,
    effective: &'a EffectiveConfig,
}

fn write_outcome(
    dir: &Path,
    effective: &EffectiveConfig,
    result: &std::result::Result<RunRecord, RunFailure>,
    wall_clock: f64,
) -> Result<()> {
    create_dir(dir)?;
    let (record, error) = match result {
        Ok(r) => (r, None),
        Err(f) => (&f.partial, Some(f.error.to_string())),
    };
    record.final_map.write_csv(dir.join("A.csv"))?;
    write_trace(&dir.join("trace.csv"), record)?;
    let summary = Summary {
        status: if error.is_some() { "failed" } else { "ok" },
        error,
        controller: record.controller.name(),
        steps: record.steps.len(),
        initial_cost: record.initial_cost,
        final_cost: record.final_cost,
        controller_seconds: record.controller_seconds,
        wall_clock_seconds: wall_clock,
        settings_hash: effective.settings_hash()?,
        effective,
    };
    let text = toml::to_string(&summary).map_err(|e| SpreaderError::Internal(e.to_string()))?;
    let path = dir.join("summary.toml");
    let mut f = std::fs::File::create(&path).map_err(|e| SpreaderError::io(&path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| SpreaderError::io(&path, e))?;
    info!("wrote {}", dir.display());
    if summary.status == "failed" {
        error!("partial results written to {}", dir.display());
    }
    Ok(())
}
