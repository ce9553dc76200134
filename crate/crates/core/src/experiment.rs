//! Parameter sweeps over arrival rate and algorithm, with per-cell output
//! directories, a resumable manifest and an ensemble summary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::allocation::{certify_exactness, Algorithm, AllocationConfig, Occupancy};
use crate::netmodel::{parse_network, prune_nodes, subtree_index, validate_tree, NetworkError, NetworkSpec, RootedTree, SubtreeIndex};
use crate::simulate::{occupancy_at, parse_series, parse_vehicles, run, RunOutput, SimulationConfig, SimulationError, VehicleRecord};
use crate::stats::{ensemble, summary_csv, CiMethod, RunObservables, StatRecord, Windowing};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid grid `{spec}`: {message}")]
    Grid { spec: String, message: String },
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Network {
        path: PathBuf,
        #[source]
        source: NetworkError,
    },
    #[error("{path}: {source}")]
    Simulation {
        path: PathBuf,
        #[source]
        source: SimulationError,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_path_buf(), source }
}

/// Grid values are kept on a 1e-9 lattice so that `0.1 + 2 * 0.05` and
/// `0.2` name the same cell.
pub fn round_rate(x: f64) -> f64 {
    (x * 1e9).round() / 1e9
}

/// Parses `a:b:s` ranges (inclusive of `b`), single values, or a comma
/// separated union of both. The result is sorted and free of duplicates.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>, ExperimentError> {
    let fail = |message: String| ExperimentError::Grid { spec: spec.to_string(), message };
    let mut values = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let nums: Vec<f64> = part
            .split(':')
            .map(|s| s.trim().parse::<f64>().map_err(|_| fail(format!("`{s}` is not a number"))))
            .collect::<Result<_, _>>()?;
        match nums[..] {
            [v] => values.push(v),
            [a, b, s] => {
                if !(s > 0.0 && s.is_finite()) {
                    return Err(fail(format!("step must be positive, got {s}")));
                }
                if !(a.is_finite() && b.is_finite()) || a > b {
                    return Err(fail(format!("range {a}..{b} is empty")));
                }
                let count = ((b - a) / s + 1e-9).floor();
                if count > 1e6 {
                    return Err(fail("more than a million points".into()));
                }
                values.extend((0..=count as u64).map(|k| a + k as f64 * s));
            }
            _ => return Err(fail(format!("`{part}` is neither a value nor a:b:s"))),
        }
    }
    let mut values: Vec<f64> = values.into_iter().map(round_rate).collect();
    if let Some(v) = values.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
        return Err(fail(format!("rates must be non-negative, got {v}")));
    }
    values.sort_by(f64::total_cmp);
    values.dedup();
    if values.is_empty() {
        return Err(fail("no values".into()));
    }
    Ok(values)
}

/// Arrival stream used for rate `lambda` when streams are independent per
/// rate.
pub fn lambda_stream(lambda: f64) -> u64 {
    (round_rate(lambda) * 1e9).round() as u64
}

/// A parsed, validated and optionally pruned network with its content
/// digest.
#[derive(Debug, Clone)]
pub struct LoadedNetwork {
    pub spec: NetworkSpec,
    pub tree: RootedTree,
    pub index: SubtreeIndex,
    /// SHA-256 of the file contents.
    pub digest: String,
}

/// Reads a network file. With `prune_key`, the node list stored under that
/// header key is removed first.
pub fn load_network(path: &Path, prune_key: Option<&str>) -> Result<LoadedNetwork, ExperimentError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let net = |source| ExperimentError::Network { path: path.to_path_buf(), source };
    let mut spec = parse_network(&text).map_err(net)?;
    if let Some(key) = prune_key {
        if !spec.metadata.contains_key(key) {
            return Err(ExperimentError::Plan(format!("{} has no `{key}` header field to prune by", path.display())));
        }
        let remove = spec.metadata_nodes(key).map_err(net)?;
        spec = prune_nodes(&spec, &remove).map_err(net)?;
    }
    let tree = validate_tree(&spec).map_err(net)?;
    let index = subtree_index(&tree);
    Ok(LoadedNetwork { spec, tree, index, digest: hex(&Sha256::digest(text.as_bytes())) })
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub network: PathBuf,
    /// Header key listing nodes to remove before simulating.
    pub prune: Option<String>,
    pub algorithms: Vec<Algorithm>,
    pub grid: Vec<f64>,
    pub runs: usize,
    pub base_seed: u64,
    /// Template for every cell; rate, algorithm, seed and stream are
    /// overwritten per cell.
    pub simulation: SimulationConfig,
    /// Share one arrival stream across rates instead of one per rate.
    pub common_arrivals: bool,
    pub windowing: Windowing,
    pub ci: CiMethod,
    pub out: PathBuf,
    /// Worker threads; 0 uses all available processors.
    pub jobs: usize,
}

impl ExperimentPlan {
    pub fn new(network: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        Self {
            network: network.into(),
            prune: None,
            algorithms: vec![Algorithm::MaxFlow, Algorithm::ProportionalFairness],
            grid: vec![0.1],
            runs: 1,
            base_seed: 0,
            simulation: SimulationConfig::default(),
            common_arrivals: false,
            windowing: Windowing::default(),
            ci: CiMethod::Normal,
            out: out.into(),
            jobs: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::Plan(m.to_string()));
        if self.grid.is_empty() {
            return bad("rate grid is empty");
        }
        if self.algorithms.is_empty() {
            return bad("no algorithm selected");
        }
        if self.runs == 0 {
            return bad("runs must be at least 1");
        }
        if self.grid.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return bad("rates must be non-negative");
        }
        if !(self.windowing.window > 0.0 && self.windowing.trim >= 0.0) {
            return bad("window must be positive and trim non-negative");
        }
        self.simulation.validate().map_err(|e| ExperimentError::Plan(e.to_string()))
    }

    /// All cells in summary order: rate, then algorithm, then run.
    pub fn cells(&self) -> Vec<Cell> {
        let mut algorithms = self.algorithms.clone();
        algorithms.sort();
        algorithms.dedup();
        let mut cells = Vec::new();
        for &lambda in &self.grid {
            for &algorithm in &algorithms {
                for run in 0..self.runs {
                    cells.push(Cell { lambda: round_rate(lambda), algorithm, run });
                }
            }
        }
        cells
    }

    pub fn cell_config(&self, cell: &Cell) -> SimulationConfig {
        SimulationConfig {
            lambda: cell.lambda,
            algorithm: cell.algorithm,
            seed: self.base_seed.wrapping_add(cell.run as u64),
            arrival_stream: if self.common_arrivals { self.simulation.arrival_stream } else { lambda_stream(cell.lambda) },
            ..self.simulation.clone()
        }
    }

    /// Hash of everything that affects results; output location and
    /// parallelism are excluded.
    pub fn digest(&self, network_digest: &str) -> String {
        let key = serde_json::json!({
            "network": network_digest,
            "prune": self.prune,
            "algorithms": self.algorithms,
            "grid": self.grid,
            "runs": self.runs,
            "base_seed": self.base_seed,
            "simulation": self.simulation,
            "common_arrivals": self.common_arrivals,
        });
        hex(&Sha256::digest(key.to_string().as_bytes()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub lambda: f64,
    pub algorithm: Algorithm,
    pub run: usize,
}

impl Cell {
    pub fn dir_name(&self) -> String {
        format!("lambda-{}_{}_run-{:03}", self.lambda, self.algorithm, self.run)
    }
}

/// What a cell directory's `run.json` holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub network: PathBuf,
    pub network_digest: String,
    pub prune: Option<String>,
    pub config: SimulationConfig,
    pub solves: u64,
    pub certificate_retries: u64,
}

pub const SERIES_FILE: &str = "series.csv";
pub const VEHICLES_FILE: &str = "vehicles.csv";
pub const RUN_FILE: &str = "run.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const RUNS_DIR: &str = "runs";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "state", content = "message")]
pub enum CellStatus {
    Completed,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub cell: Cell,
    pub seed: u64,
    /// Hash of the cell's own configuration and network.
    pub config_hash: String,
    pub status: CellStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub plan_hash: String,
    pub cells: BTreeMap<String, ManifestEntry>,
}

impl Manifest {
    pub fn load(out: &Path) -> Result<Option<Manifest>, ExperimentError> {
        let path = out.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map(Some).map_err(|source| ExperimentError::Json { path, source })
    }

    fn save(&self, out: &Path) -> Result<(), ExperimentError> {
        let path = out.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|source| ExperimentError::Json { path: path.clone(), source })?;
        fs::write(&path, text + "\n").map_err(io_err(&path))
    }
}

fn cell_hash(config: &SimulationConfig, network_digest: &str, prune: &Option<String>) -> String {
    let key = serde_json::json!({ "network": network_digest, "prune": prune, "config": config });
    hex(&Sha256::digest(key.to_string().as_bytes()))
}

#[derive(Debug, Clone, Default)]
pub struct SweepReport {
    pub computed: Vec<Cell>,
    pub skipped: Vec<Cell>,
    pub failed: Vec<(Cell, String)>,
    pub records: Vec<StatRecord>,
    pub summary: PathBuf,
}

/// Writes `series.csv`, `vehicles.csv` and `run.json` into `dir`.
pub fn write_run_dir(dir: &Path, record: &RunRecord, output: &RunOutput) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(RUN_FILE);
    let json = serde_json::to_string_pretty(record).map_err(|source| ExperimentError::Json { path, source })?;
    for (name, text) in [(SERIES_FILE, output.series_csv()), (VEHICLES_FILE, output.vehicles_csv()), (RUN_FILE, json + "\n")] {
        let path = dir.join(name);
        fs::write(&path, text).map_err(io_err(&path))?;
    }
    Ok(())
}

impl RunRecord {
    pub fn new(network: &Path, net: &LoadedNetwork, prune: Option<String>, config: SimulationConfig, output: &RunOutput) -> Self {
        Self {
            network: network.to_path_buf(),
            network_digest: net.digest.clone(),
            prune,
            config,
            solves: output.stats.solves,
            certificate_retries: output.stats.certificate_retries,
        }
    }
}

fn run_cell(plan: &ExperimentPlan, net: &LoadedNetwork, cell: &Cell, dir: &Path) -> Result<(), String> {
    let config = plan.cell_config(cell);
    let output = run(&net.tree, &net.index, &config).map_err(|e| e.to_string())?;
    let record = RunRecord::new(&plan.network, net, plan.prune.clone(), config, &output);
    write_run_dir(dir, &record, &output).map_err(|e| e.to_string())
}

fn cell_is_complete(dir: &Path) -> bool {
    [SERIES_FILE, VEHICLES_FILE, RUN_FILE].iter().all(|f| dir.join(f).is_file())
}

/// Runs every cell not already completed under the same configuration,
/// then rebuilds the summary from the files on disk.
pub fn run_sweep(plan: &ExperimentPlan) -> Result<SweepReport, ExperimentError> {
    plan.validate()?;
    let net = load_network(&plan.network, plan.prune.as_deref())?;
    fs::create_dir_all(plan.out.join(RUNS_DIR)).map_err(io_err(&plan.out))?;
    let previous = Manifest::load(&plan.out)?.map(|m| m.cells).unwrap_or_default();

    let cells = plan.cells();
    let mut todo = Vec::new();
    let mut report = SweepReport::default();
    for cell in &cells {
        let hash = cell_hash(&plan.cell_config(cell), &net.digest, &plan.prune);
        let dir = plan.out.join(RUNS_DIR).join(cell.dir_name());
        let done = previous
            .get(&cell.dir_name())
            .is_some_and(|e| e.config_hash == hash && e.status == CellStatus::Completed && cell_is_complete(&dir));
        if done {
            report.skipped.push(*cell);
        } else {
            todo.push((*cell, hash, dir));
        }
    }

    let work = || -> Vec<Result<(), String>> { todo.par_iter().map(|(cell, _, dir)| run_cell(plan, &net, cell, dir)).collect() };
    let jobs = if plan.jobs == 0 { rayon::current_num_threads() } else { plan.jobs };
    let outcomes = match rayon::ThreadPoolBuilder::new().num_threads(jobs.clamp(1, todo.len().max(1))).build() {
        Ok(pool) => pool.install(work),
        Err(_) => work(),
    };

    let mut manifest = Manifest { plan_hash: plan.digest(&net.digest), cells: BTreeMap::new() };
    let mut hashes: BTreeMap<String, String> = BTreeMap::new();
    for ((cell, hash, _), outcome) in todo.iter().zip(outcomes) {
        let status = match outcome {
            Ok(()) => {
                report.computed.push(*cell);
                CellStatus::Completed
            }
            Err(message) => {
                report.failed.push((*cell, message.clone()));
                CellStatus::Failed(message)
            }
        };
        hashes.insert(cell.dir_name(), hash.clone());
        let seed = plan.cell_config(cell).seed;
        manifest.cells.insert(cell.dir_name(), ManifestEntry { cell: *cell, seed, config_hash: hash.clone(), status });
    }
    for cell in &report.skipped {
        if let Some(entry) = previous.get(&cell.dir_name()) {
            manifest.cells.insert(cell.dir_name(), entry.clone());
        }
    }
    manifest.save(&plan.out)?;

    let finished: Vec<Cell> =
        cells.iter().filter(|c| matches!(manifest.cells.get(&c.dir_name()), Some(e) if e.status == CellStatus::Completed)).copied().collect();
    report.records = summarize_cells(&plan.out, &finished, plan.windowing, plan.ci)?;
    report.summary = plan.out.join(SUMMARY_FILE);
    fs::write(&report.summary, summary_csv(&report.records)).map_err(io_err(&report.summary))?;
    Ok(report)
}

/// Per-run observables from a cell directory.
pub fn observe_dir(dir: &Path, lambda: f64, windowing: Windowing) -> Result<RunObservables, ExperimentError> {
    let read = |name: &str| {
        let path = dir.join(name);
        fs::read_to_string(&path).map_err(io_err(&path))
    };
    let sim_err = |name: &str| {
        let path = dir.join(name);
        move |source| ExperimentError::Simulation { path, source }
    };
    let series = parse_series(&read(SERIES_FILE)?).map_err(sim_err(SERIES_FILE))?;
    let vehicles = parse_vehicles(&read(VEHICLES_FILE)?).map_err(sim_err(VEHICLES_FILE))?;
    Ok(RunObservables::compute(&series, &vehicles, lambda, windowing))
}

/// Ensemble records for the given cells, one per `(λ, algorithm)` in the
/// order the cells first appear.
pub fn summarize_cells(out: &Path, cells: &[Cell], windowing: Windowing, ci: CiMethod) -> Result<Vec<StatRecord>, ExperimentError> {
    let mut groups: Vec<((f64, Algorithm), Vec<RunObservables>)> = Vec::new();
    for cell in cells {
        let obs = observe_dir(&out.join(RUNS_DIR).join(cell.dir_name()), cell.lambda, windowing)?;
        let key = (cell.lambda, cell.algorithm);
        match groups.last_mut() {
            Some((k, runs)) if *k == key => runs.push(obs),
            _ => groups.push((key, vec![obs])),
        }
    }
    Ok(groups.into_iter().map(|((l, a), runs)| ensemble(l, a, windowing.window, &runs, ci)).collect())
}

/// Rebuilds the summary of an existing sweep directory from its manifest,
/// for example with a different window or trim.
pub fn summarize_sweep(out: &Path, windowing: Windowing, ci: CiMethod) -> Result<Vec<StatRecord>, ExperimentError> {
    let Some(manifest) = Manifest::load(out)? else {
        return Err(ExperimentError::Plan(format!("{} has no {MANIFEST_FILE}", out.display())));
    };
    let mut cells: Vec<Cell> = manifest.cells.values().filter(|e| e.status == CellStatus::Completed).map(|e| e.cell).collect();
    cells.sort_by(|a, b| a.lambda.total_cmp(&b.lambda).then(a.algorithm.cmp(&b.algorithm)).then(a.run.cmp(&b.run)));
    summarize_cells(out, &cells, windowing, ci)
}

/// Rank-1 audit of states reconstructed from a run's vehicle records.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AuditReport {
    pub states: usize,
    pub passed: usize,
    pub max_relative_gap: f64,
    /// Step indices whose re-solve failed or did not certify.
    pub failures: Vec<(u64, String)>,
}

impl AuditReport {
    pub fn pass_rate(&self) -> f64 {
        if self.states == 0 {
            1.0
        } else {
            self.passed as f64 / self.states as f64
        }
    }

    pub fn merge(&mut self, other: AuditReport) {
        self.states += other.states;
        self.passed += other.passed;
        self.max_relative_gap = self.max_relative_gap.max(other.max_relative_gap);
        self.failures.extend(other.failures);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuditOptions {
    /// Number of distinct occupied states to re-solve; all when larger
    /// than the available set.
    pub samples: usize,
    pub seed: u64,
    /// Multiplies every off-diagonal `W` entry by `1 + corrupt` before
    /// certifying; used to check that the audit can fail.
    pub corrupt: Option<f64>,
}

impl Default for AuditOptions {
    fn default() -> Self {
        Self { samples: 100, seed: 0, corrupt: None }
    }
}

/// Re-solves sampled occupancy states of one run and certifies each.
pub fn audit_states(
    tree: &RootedTree,
    idx: &SubtreeIndex,
    config: &SimulationConfig,
    vehicles: &[VehicleRecord],
    opts: &AuditOptions,
) -> AuditReport {
    let steps = config.steps();
    let mut seen = BTreeMap::<Vec<u32>, u64>::new();
    for k in 0..steps {
        if let Some(occ) = occupancy_at(tree, vehicles, config.step, k) {
            if !occ.is_empty() {
                seen.entry(occ.counts().to_vec()).or_insert(k);
            }
        }
    }
    let states: Vec<(Vec<u32>, u64)> = seen.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut picked: Vec<usize> = sample(&mut rng, states.len(), opts.samples.min(states.len())).into_vec();
    picked.sort_unstable();

    let cfg: AllocationConfig = config.allocation_config();
    let mut report = AuditReport::default();
    for i in picked {
        let (counts, step) = &states[i];
        report.states += 1;
        match audit_one(tree, idx, counts, config.algorithm, &cfg, opts.corrupt) {
            Ok(gap) if gap <= cfg.exactness_tolerance => {
                report.passed += 1;
                report.max_relative_gap = report.max_relative_gap.max(gap);
            }
            Ok(gap) => {
                report.max_relative_gap = report.max_relative_gap.max(gap);
                report.failures.push((*step, format!("relative gap {gap:e}")));
            }
            Err(e) => report.failures.push((*step, e)),
        }
    }
    report
}

fn audit_one(
    tree: &RootedTree,
    idx: &SubtreeIndex,
    counts: &[u32],
    algorithm: Algorithm,
    cfg: &AllocationConfig,
    corrupt: Option<f64>,
) -> Result<f64, String> {
    let occ = Occupancy::from_counts(counts.to_vec()).map_err(|e| e.to_string())?;
    let model = crate::allocation::build_for(algorithm, tree, idx, &occ, cfg).map_err(|e| e.to_string())?;
    let solution = model.solve(&cfg.solver).map_err(|e| e.to_string())?;
    let (d, mut e) = model.w_entries(tree, &solution.x);
    if let Some(f) = corrupt {
        e.iter_mut().skip(1).for_each(|v| *v *= 1.0 + f);
    }
    Ok(certify_exactness(tree, &d, &e, cfg.exactness_tolerance).max_relative_gap)
}

pub fn read_run_record(dir: &Path) -> Result<RunRecord, ExperimentError> {
    let path = dir.join(RUN_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|source| ExperimentError::Json { path, source })
}

/// Audits one cell directory using its `run.json` and `vehicles.csv`.
pub fn audit_dir(dir: &Path, opts: &AuditOptions) -> Result<AuditReport, ExperimentError> {
    let record = read_run_record(dir)?;
    let net = load_network(&record.network, record.prune.as_deref())?;
    let vpath = dir.join(VEHICLES_FILE);
    let vehicles = parse_vehicles(&fs::read_to_string(&vpath).map_err(io_err(&vpath))?)
        .map_err(|source| ExperimentError::Simulation { path: vpath, source })?;
    Ok(audit_states(&net.tree, &net.index, &record.config, &vehicles, opts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_ranges_include_the_end() {
        assert_eq!(parse_grid("0.1:0.3:0.1").unwrap(), vec![0.1, 0.2, 0.3]);
        assert_eq!(parse_grid("0.05:1:0.05").unwrap().len(), 20);
    }

    #[test]
    fn grid_unions_are_sorted_and_unique() {
        assert_eq!(parse_grid("0.3, 0.1:0.3:0.1, 0.25").unwrap(), vec![0.1, 0.2, 0.25, 0.3]);
    }

    #[test]
    fn grid_errors() {
        for bad in ["", "a", "0.1:0.2", "0.3:0.1:0.1", "0:1:0", "-1", "0:1:-0.5"] {
            assert!(parse_grid(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn cells_are_ordered() {
        let mut plan = ExperimentPlan::new("n.csv", "out");
        plan.grid = vec![0.1, 0.2];
        plan.runs = 2;
        plan.algorithms = vec![Algorithm::ProportionalFairness, Algorithm::MaxFlow];
        let names: Vec<String> = plan.cells().iter().map(Cell::dir_name).collect();
        assert_eq!(names[0], "lambda-0.1_mf_run-000");
        assert_eq!(names[3], "lambda-0.1_pf_run-001");
        assert_eq!(names.len(), 8);
    }

    #[test]
    fn seeds_follow_run_index_and_streams_follow_rate() {
        let mut plan = ExperimentPlan::new("n.csv", "out");
        plan.base_seed = 40;
        let a = plan.cell_config(&Cell { lambda: 0.1, algorithm: Algorithm::MaxFlow, run: 2 });
        let b = plan.cell_config(&Cell { lambda: 0.2, algorithm: Algorithm::MaxFlow, run: 2 });
        assert_eq!((a.seed, b.seed), (42, 42));
        assert_ne!(a.arrival_stream, b.arrival_stream);
        plan.common_arrivals = true;
        let c = plan.cell_config(&Cell { lambda: 0.2, algorithm: Algorithm::MaxFlow, run: 2 });
        assert_eq!(c.arrival_stream, 0);
    }

    #[test]
    fn digest_ignores_output_and_jobs() {
        let a = ExperimentPlan::new("n.csv", "out");
        let mut b = a.clone();
        b.out = "elsewhere".into();
        b.jobs = 7;
        assert_eq!(a.digest("x"), b.digest("x"));
        b.runs = 3;
        assert_ne!(a.digest("x"), b.digest("x"));
    }
}
