//! Settings file and the flag > file > default merge.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Deserialize;

use gridcharge_core::allocation::Algorithm;
use gridcharge_core::simulate::SimulationConfig;

use crate::usage;

pub const SOLVER_TOL_ENV: &str = "GRIDCHARGE_SOLVER_TOL";

/// Keys accepted in a `--config` TOML file. Every key is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub network: Option<PathBuf>,
    pub prune: Option<String>,
    /// `mf`, `pf`, or a comma separated list for sweeps.
    pub algo: Option<String>,
    pub lambda: Option<f64>,
    pub grid: Option<String>,
    pub runs: Option<usize>,
    pub horizon: Option<f64>,
    pub step: Option<f64>,
    pub alpha: Option<f64>,
    pub battery: Option<f64>,
    pub nominal_voltage: Option<f64>,
    pub seed: Option<u64>,
    pub pin_root: Option<bool>,
    pub solver_tolerance: Option<f64>,
    pub common_arrivals: Option<bool>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub window: Option<f64>,
    pub trim: Option<f64>,
    pub bootstrap: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| usage(format!("bad config {}: {e}", path.display())))
    }
}

/// Simulation settings shared by `run` and `sweep`, as given on the
/// command line.
#[derive(Debug, Default, Clone)]
pub struct SimFlags {
    pub horizon: Option<f64>,
    pub step: Option<f64>,
    pub alpha: Option<f64>,
    pub battery: Option<f64>,
    pub nominal_voltage: Option<f64>,
    pub seed: Option<u64>,
    pub pin_root: bool,
}

pub fn simulation_config(flags: &SimFlags, file: &FileConfig) -> Result<SimulationConfig> {
    let d = SimulationConfig::default();
    let mut cfg = SimulationConfig {
        horizon: flags.horizon.or(file.horizon).unwrap_or(d.horizon),
        step: flags.step.or(file.step).unwrap_or(d.step),
        alpha: flags.alpha.or(file.alpha).unwrap_or(d.alpha),
        battery: flags.battery.or(file.battery).unwrap_or(d.battery),
        nominal_voltage: flags.nominal_voltage.or(file.nominal_voltage).unwrap_or(d.nominal_voltage),
        seed: flags.seed.or(file.seed).unwrap_or(d.seed),
        pin_root: flags.pin_root || file.pin_root.unwrap_or(d.pin_root),
        solver_tolerance: file.solver_tolerance.unwrap_or(d.solver_tolerance),
        ..d
    };
    if let Ok(raw) = std::env::var(SOLVER_TOL_ENV) {
        cfg.solver_tolerance =
            raw.trim().parse().map_err(|_| usage(format!("{SOLVER_TOL_ENV}=`{raw}` is not a number")))?;
    }
    Ok(cfg)
}

pub fn parse_algorithms(spec: &str) -> Result<Vec<Algorithm>> {
    let algs: Vec<Algorithm> = spec
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<Algorithm>().map_err(usage))
        .collect::<Result<_>>()?;
    if algs.is_empty() {
        return Err(usage("no algorithm given"));
    }
    Ok(algs)
}

pub fn require_network(flag: Option<PathBuf>, file: &FileConfig) -> Result<PathBuf> {
    flag.or_else(|| file.network.clone()).ok_or_else(|| usage("no network given (use --network or the config file)"))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}
