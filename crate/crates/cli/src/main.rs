//! `gridcharge`: single runs, rate sweeps, statistics and exactness audits.

mod config;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};

use gridcharge_core::allocation::Algorithm;
use gridcharge_core::experiment::{
    audit_dir, load_network, observe_dir, read_run_record, run_sweep, summarize_sweep, write_run_dir, AuditOptions,
    AuditReport, ExperimentError, ExperimentPlan, LoadedNetwork, RunRecord, MANIFEST_FILE, RUNS_DIR, RUN_FILE,
    SUMMARY_FILE,
};
use gridcharge_core::simulate::{run, SimulationConfig, SimulationError};
use gridcharge_core::stats::{summary_csv, CiMethod, Windowing};

use config::{parse_algorithms, require_network, simulation_config, write_text, FileConfig, SimFlags};

/// Bad flags, unreadable inputs and invalid configurations. Exits with 2.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub(crate) fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser)]
#[command(name = "gridcharge", version, about = "EV charging simulations on radial distribution networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one run and write its series and vehicle records.
    Run(RunArgs),
    /// Run a grid of arrival rates and algorithms with an ensemble per cell.
    Sweep(SweepArgs),
    /// Recompute observables for a sweep or a single run directory.
    Stats(StatsArgs),
    /// Re-solve recorded states and check the rank-1 certificate.
    Audit(AuditArgs),
    /// Check a network file.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct Common {
    /// Edge-list network file.
    #[arg(long)]
    network: Option<PathBuf>,
    /// TOML file with defaults for any flag.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Header key naming nodes to remove before simulating, e.g. `pv`.
    #[arg(long)]
    prune: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    horizon: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    step: Option<f64>,
    /// Allowed relative voltage deviation.
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f64>,
    /// Battery capacity per vehicle.
    #[arg(long, allow_negative_numbers = true)]
    battery: Option<f64>,
    #[arg(long = "voltage", allow_negative_numbers = true)]
    nominal_voltage: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fix the root voltage at its nominal value.
    #[arg(long)]
    pin_root: bool,
}

impl Common {
    fn flags(&self) -> SimFlags {
        SimFlags {
            horizon: self.horizon,
            step: self.step,
            alpha: self.alpha,
            battery: self.battery,
            nominal_voltage: self.nominal_voltage,
            seed: self.seed,
            pin_root: self.pin_root,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// `mf` or `pf`.
    #[arg(long)]
    algo: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    lambda: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// `mf`, `pf` or `mf,pf`.
    #[arg(long)]
    algo: Option<String>,
    /// Rates as `a:b:s`, single values, or a comma separated union.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to the available processors.
    #[arg(long)]
    jobs: Option<usize>,
    #[command(flatten)]
    window: WindowArgs,
    /// Use the same arrival stream at every rate.
    #[arg(long)]
    common_arrivals: bool,
}

#[derive(Args)]
struct WindowArgs {
    #[arg(long, allow_negative_numbers = true)]
    window: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    trim: Option<f64>,
    /// Bootstrap resamples for intervals instead of the normal approximation.
    #[arg(long)]
    bootstrap: Option<usize>,
}

impl WindowArgs {
    fn resolve(&self, file: &FileConfig) -> Result<(Windowing, CiMethod)> {
        let d = Windowing::default();
        let w = Windowing {
            window: self.window.or(file.window).unwrap_or(d.window),
            trim: self.trim.or(file.trim).unwrap_or(d.trim),
        };
        if !(w.window > 0.0 && w.window.is_finite()) {
            return Err(usage(format!("window must be positive, got {}", w.window)));
        }
        if !(w.trim >= 0.0 && w.trim.is_finite()) {
            return Err(usage(format!("trim must be non-negative, got {}", w.trim)));
        }
        let ci = match self.bootstrap.or(file.bootstrap) {
            Some(0) => return Err(usage("bootstrap needs at least one resample")),
            Some(resamples) => CiMethod::Bootstrap { resamples, seed: 0 },
            None => CiMethod::Normal,
        };
        Ok((w, ci))
    }
}

#[derive(Args)]
struct StatsArgs {
    /// Sweep or run directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    window: WindowArgs,
}

#[derive(Args)]
struct AuditArgs {
    /// Sweep or run directory.
    #[arg(long)]
    out: PathBuf,
    /// States re-solved per run.
    #[arg(long, default_value_t = 100)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Inflate off-diagonal entries by this relative amount before
    /// certifying. For testing the audit itself.
    #[arg(long)]
    corrupt: Option<f64>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    network: PathBuf,
    #[arg(long)]
    prune: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Audit(a) => cmd_audit(a),
        Command::Validate(a) => cmd_validate(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

/// Missing or malformed inputs are usage errors; everything else is a
/// runtime failure.
fn classify(e: ExperimentError) -> anyhow::Error {
    match e {
        ExperimentError::Io { .. }
        | ExperimentError::Network { .. }
        | ExperimentError::Grid { .. }
        | ExperimentError::Plan(_)
        | ExperimentError::Json { .. } => usage(e.to_string()),
        ExperimentError::Simulation { .. } => e.into(),
    }
}

fn network(path: &Path, prune: Option<&str>) -> Result<LoadedNetwork> {
    load_network(path, prune).map_err(classify)
}

fn cmd_run(a: RunArgs) -> Result<ExitCode> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let path = require_network(a.common.network.clone(), &file)?;
    let prune = a.common.prune.clone().or(file.prune.clone());
    let net = network(&path, prune.as_deref())?;
    let algorithm = match a.algo.as_deref().or(file.algo.as_deref()) {
        Some(s) => s.parse::<Algorithm>().map_err(usage)?,
        None => Algorithm::MaxFlow,
    };
    let config = SimulationConfig {
        lambda: a.lambda.or(file.lambda).unwrap_or(SimulationConfig::default().lambda),
        algorithm,
        ..simulation_config(&a.common.flags(), &file)?
    };
    config.validate().map_err(|e| usage(e.to_string()))?;
    let out = a.out.or(file.out.clone()).unwrap_or_else(|| PathBuf::from("gridcharge-run"));

    let output = match run(&net.tree, &net.index, &config) {
        Ok(o) => o,
        Err(e) => {
            if let SimulationError::Allocation { source, .. } = &e {
                if let Some(dump) = source.dump() {
                    std::fs::create_dir_all(&out)?;
                    let path = out.join("failed-problem.txt");
                    write_text(&path, dump)?;
                    eprintln!("problem written to {}", path.display());
                }
            }
            bail!(e);
        }
    };
    let record = RunRecord::new(&path, &net, prune, config, &output);
    write_run_dir(&out, &record, &output).map_err(anyhow::Error::from)?;
    println!(
        "{}: {} completed, {} still charging, {} solves ({} retried)",
        out.display(),
        output.completed.len(),
        output.pending.len(),
        output.stats.solves,
        output.stats.certificate_retries
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_sweep(a: SweepArgs) -> Result<ExitCode> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let path = require_network(a.common.network.clone(), &file)?;
    let out = a.out.clone().or(file.out.clone()).ok_or_else(|| usage("no output directory given (use --out)"))?;
    let mut plan = ExperimentPlan::new(path, out);
    plan.prune = a.common.prune.clone().or(file.prune.clone());
    if let Some(s) = a.algo.as_deref().or(file.algo.as_deref()) {
        plan.algorithms = parse_algorithms(s)?;
    }
    plan.grid = match (a.grid.as_deref().or(file.grid.as_deref()), file.lambda) {
        (Some(g), _) => gridcharge_core::experiment::parse_grid(g).map_err(classify)?,
        (None, Some(l)) => vec![l],
        (None, None) => return Err(usage("no rate grid given (use --grid)")),
    };
    plan.runs = a.runs.or(file.runs).unwrap_or(1);
    plan.base_seed = a.common.seed.or(file.seed).unwrap_or(0);
    plan.simulation = simulation_config(&a.common.flags(), &file)?;
    plan.common_arrivals = a.common_arrivals || file.common_arrivals.unwrap_or(false);
    (plan.windowing, plan.ci) = a.window.resolve(&file)?;
    plan.jobs = a.jobs.or(file.jobs).unwrap_or(0);
    plan.validate().map_err(classify)?;
    // Fail on a bad network before any cell starts.
    network(&plan.network, plan.prune.as_deref())?;

    let report = run_sweep(&plan).map_err(classify)?;
    println!(
        "{} cells computed, {} reused, {} failed; summary in {}",
        report.computed.len(),
        report.skipped.len(),
        report.failed.len(),
        report.summary.display()
    );
    for (cell, message) in &report.failed {
        eprintln!("failed {}: {message}", cell.dir_name());
    }
    Ok(if report.failed.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn cmd_stats(a: StatsArgs) -> Result<ExitCode> {
    let (windowing, ci) = a.window.resolve(&FileConfig::default())?;
    if a.out.join(MANIFEST_FILE).is_file() {
        let records = summarize_sweep(&a.out, windowing, ci).map_err(classify)?;
        let csv = summary_csv(&records);
        write_text(&a.out.join(SUMMARY_FILE), &csv)?;
        print!("{csv}");
        return Ok(ExitCode::SUCCESS);
    }
    if a.out.join(RUN_FILE).is_file() {
        let record = read_run_record(&a.out).map_err(classify)?;
        let obs = observe_dir(&a.out, record.config.lambda, windowing).map_err(classify)?;
        let show = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| x.to_string());
        println!("eta={} chi={} gini={}", show(obs.eta), show(obs.chi), show(obs.gini));
        return Ok(ExitCode::SUCCESS);
    }
    Err(usage(format!("{} holds neither {MANIFEST_FILE} nor {RUN_FILE}", a.out.display())))
}

fn run_dirs(out: &Path) -> Result<Vec<PathBuf>> {
    if out.join(RUN_FILE).is_file() {
        return Ok(vec![out.to_path_buf()]);
    }
    let runs = out.join(RUNS_DIR);
    if !runs.is_dir() {
        return Ok(Vec::new());
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(&runs)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(RUN_FILE).is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn cmd_audit(a: AuditArgs) -> Result<ExitCode> {
    if !a.out.exists() {
        return Err(usage(format!("{} does not exist", a.out.display())));
    }
    let dirs = run_dirs(&a.out)?;
    if dirs.is_empty() {
        eprintln!("warning: no runs found under {}; nothing to audit", a.out.display());
        return Ok(ExitCode::SUCCESS);
    }
    let opts = AuditOptions { samples: a.samples, seed: a.seed, corrupt: a.corrupt };
    let mut total = AuditReport::default();
    for dir in &dirs {
        let report = audit_dir(dir, &opts).map_err(classify)?;
        for (step, why) in &report.failures {
            eprintln!("{} step {step}: {why}", dir.display());
        }
        total.merge(report);
    }
    println!(
        "audited {} states in {} runs: pass rate {:.2}%, max relative gap {:e}",
        total.states,
        dirs.len(),
        100.0 * total.pass_rate(),
        total.max_relative_gap
    );
    Ok(if total.failures.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn cmd_validate(a: ValidateArgs) -> Result<ExitCode> {
    let net = network(&a.network, a.prune.as_deref())?;
    let depth = (0..net.tree.len()).map(|k| net.tree.depth(k)).max().unwrap_or(0);
    println!(
        "{}: {} nodes, {} edges, root {}, depth {}",
        a.network.display(),
        net.tree.len(),
        net.tree.len() - 1,
        net.tree.id(net.tree.root()),
        depth
    );
    Ok(ExitCode::SUCCESS)
}
