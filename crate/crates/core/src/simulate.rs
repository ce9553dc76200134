//! Discrete-time charging dynamics.
//!
//! Each step of length `step` starting at `t`:
//!
//! 1. vehicles arriving in `[t, t + step)` plug in with an empty battery;
//! 2. if the set of vehicles changed since the last solve, the allocation is
//!    recomputed, otherwise the previous one is kept;
//! 3. each vehicle charges `P_l * step`, capped at the battery capacity;
//! 4. full vehicles leave at `t + step`.
//!
//! Arrivals form a Poisson process. The `k`-th arrival happens at `T_k / λ`
//! where `T_k` is the `k`-th point of a unit-rate process, and its node is
//! the `k`-th uniform draw over non-root nodes. Gaps and nodes come from
//! streams `2s` and `2s + 1` of a ChaCha8 generator seeded with the run
//! seed, where `s` is the configured arrival stream. Runs that share seed
//! and stream see the same vehicles in the same places at every λ.

use std::fmt::Write as _;

use gridcharge_conic::SolverConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocation::{allocate, Algorithm, AllocationConfig, AllocationError, AllocationResult, Formulation, Occupancy};
use crate::netmodel::{NodeId, RootedTree, SubtreeIndex};

/// Charge within this relative distance of capacity counts as full.
const FULL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("allocation failed at t = {time}: {source}")]
    Allocation {
        time: f64,
        #[source]
        source: AllocationError,
    },
    #[error("malformed {what} at line {line}: {message}")]
    Parse { what: &'static str, line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub lambda: f64,
    pub horizon: f64,
    pub step: f64,
    pub battery: f64,
    pub alpha: f64,
    pub nominal_voltage: f64,
    pub algorithm: Algorithm,
    pub seed: u64,
    /// Selects an independent pair of generator streams for the same seed.
    pub arrival_stream: u64,
    pub pin_root: bool,
    pub formulation: Formulation,
    pub solver_tolerance: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            horizon: 1000.0,
            step: 1.0,
            battery: 1.0,
            alpha: 0.1,
            nominal_voltage: 1.0,
            algorithm: Algorithm::MaxFlow,
            seed: 0,
            arrival_stream: 0,
            pin_root: false,
            formulation: Formulation::default(),
            solver_tolerance: SolverConfig::default().tolerance,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<(), SimulationError> {
        let bad = |m: String| Err(SimulationError::Config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("arrival rate must be non-negative, got {}", self.lambda));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad(format!("horizon must be positive, got {}", self.horizon));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return bad(format!("step must be positive, got {}", self.step));
        }
        if !(self.battery > 0.0 && self.battery.is_finite()) {
            return bad(format!("battery capacity must be positive, got {}", self.battery));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if !(self.nominal_voltage > 0.0 && self.nominal_voltage.is_finite()) {
            return bad(format!("nominal voltage must be positive, got {}", self.nominal_voltage));
        }
        if !(self.solver_tolerance > 0.0 && self.solver_tolerance.is_finite()) {
            return bad(format!("solver tolerance must be positive, got {}", self.solver_tolerance));
        }
        Ok(())
    }

    pub fn allocation_config(&self) -> AllocationConfig {
        AllocationConfig {
            alpha: self.alpha,
            nominal_voltage: self.nominal_voltage,
            pin_root: self.pin_root,
            formulation: self.formulation,
            solver: SolverConfig::default().with_tolerance(self.solver_tolerance),
            ..AllocationConfig::default()
        }
    }

    pub fn steps(&self) -> u64 {
        (self.horizon / self.step).ceil() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arrival {
    pub time: f64,
    /// Tree index of the node.
    pub node: usize,
}

/// Poisson arrivals with uniform node choice.
#[derive(Debug, Clone)]
pub struct ArrivalStream {
    gaps: ChaCha8Rng,
    picks: ChaCha8Rng,
    lambda: f64,
    candidates: Vec<usize>,
    /// Next arrival on the unit-rate clock.
    pending: f64,
}

impl ArrivalStream {
    pub fn new(tree: &RootedTree, lambda: f64, seed: u64, stream: u64) -> Self {
        let mut gaps = ChaCha8Rng::seed_from_u64(seed);
        gaps.set_stream(stream.wrapping_mul(2));
        let mut picks = ChaCha8Rng::seed_from_u64(seed);
        picks.set_stream(stream.wrapping_mul(2).wrapping_add(1));
        let first: f64 = gaps.sample(Exp1);
        Self { gaps, picks, lambda, candidates: tree.edges().collect(), pending: first }
    }

    pub fn next_time(&self) -> f64 {
        if self.lambda > 0.0 {
            self.pending / self.lambda
        } else {
            f64::INFINITY
        }
    }

    /// All arrivals strictly before `end` not yet returned.
    pub fn take_before(&mut self, end: f64) -> Vec<Arrival> {
        let mut out = Vec::new();
        if self.candidates.is_empty() {
            return out;
        }
        while self.next_time() < end {
            let node = self.candidates[self.picks.gen_range(0..self.candidates.len())];
            out.push(Arrival { time: self.next_time(), node });
            let gap: f64 = self.gaps.sample(Exp1);
            self.pending += gap;
        }
        out
    }
}

/// Arrivals in `[0, end)` for a fresh stream.
pub fn sample_arrivals(tree: &RootedTree, lambda: f64, seed: u64, stream: u64, end: f64) -> Vec<Arrival> {
    ArrivalStream::new(tree, lambda, seed, stream).take_before(end)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleRecord {
    pub id: u64,
    pub node: NodeId,
    pub arrival: f64,
    pub charge: f64,
    pub departure: Option<f64>,
}

impl VehicleRecord {
    pub fn charging_time(&self) -> Option<f64> {
        self.departure.map(|d| d - self.arrival)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesPoint {
    pub time: f64,
    pub vehicles: u64,
    pub aggregate_power: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SolverStats {
    pub solves: u64,
    /// Exactness failures rescued by the tighter retry.
    pub certificate_retries: u64,
    pub iterations: u64,
}

#[derive(Debug, Clone)]
struct Active {
    record: VehicleRecord,
    index: usize,
}

/// Live simulation state.
pub struct Simulation<'a> {
    tree: &'a RootedTree,
    idx: &'a SubtreeIndex,
    config: SimulationConfig,
    alloc_config: AllocationConfig,
    arrivals: ArrivalStream,
    step_index: u64,
    active: Vec<Active>,
    occupancy: Occupancy,
    allocation: Option<AllocationResult>,
    changed: bool,
    next_id: u64,
    completed: Vec<VehicleRecord>,
    stats: SolverStats,
}

impl<'a> Simulation<'a> {
    pub fn new(tree: &'a RootedTree, idx: &'a SubtreeIndex, config: SimulationConfig) -> Result<Self, SimulationError> {
        config.validate()?;
        if tree.len() < 2 {
            return Err(SimulationError::Config("network has no node besides the root".into()));
        }
        Ok(Self {
            tree,
            idx,
            alloc_config: config.allocation_config(),
            arrivals: ArrivalStream::new(tree, config.lambda, config.seed, config.arrival_stream),
            config,
            step_index: 0,
            active: Vec::new(),
            occupancy: Occupancy::empty(tree),
            allocation: None,
            changed: false,
            next_id: 0,
            completed: Vec::new(),
            stats: SolverStats::default(),
        })
    }

    pub fn clock(&self) -> f64 {
        self.step_index as f64 * self.config.step
    }

    pub fn vehicles(&self) -> usize {
        self.active.len()
    }

    pub fn occupancy(&self) -> &Occupancy {
        &self.occupancy
    }

    pub fn allocation(&self) -> Option<&AllocationResult> {
        self.allocation.as_ref()
    }

    pub fn stats(&self) -> SolverStats {
        self.stats
    }

    pub fn completed(&self) -> &[VehicleRecord] {
        &self.completed
    }

    pub fn active_records(&self) -> impl Iterator<Item = &VehicleRecord> {
        self.active.iter().map(|a| &a.record)
    }

    /// Advances one step and returns the sample taken after admission.
    pub fn step(&mut self) -> Result<SeriesPoint, SimulationError> {
        let t = self.clock();
        let dt = self.config.step;
        for a in self.arrivals.take_before(t + dt) {
            self.occupancy.add(a.node);
            self.active.push(Active {
                record: VehicleRecord { id: self.next_id, node: self.tree.id(a.node), arrival: a.time, charge: 0.0, departure: None },
                index: a.node,
            });
            self.next_id += 1;
            self.changed = true;
        }

        if self.changed {
            self.allocation = if self.active.is_empty() {
                None
            } else {
                let a = allocate(self.tree, self.idx, &self.occupancy, self.config.algorithm, &self.alloc_config)
                    .map_err(|source| SimulationError::Allocation { time: t, source })?;
                self.stats.solves += a.solves as u64;
                self.stats.certificate_retries += u64::from(a.retried);
                self.stats.iterations += a.iterations as u64;
                Some(a.result)
            };
            self.changed = false;
        }

        let point = SeriesPoint {
            time: t,
            vehicles: self.active.len() as u64,
            aggregate_power: self.allocation.as_ref().map_or(0.0, |a| a.aggregate_power()),
            objective: self.allocation.as_ref().map_or(0.0, |a| a.objective),
        };

        if let Some(alloc) = &self.allocation {
            let capacity = self.config.battery;
            let done = t + dt;
            let mut kept = Vec::with_capacity(self.active.len());
            for mut v in self.active.drain(..) {
                let p = alloc.vehicle_power(v.index).unwrap_or(0.0).max(0.0);
                v.record.charge += p * dt;
                if v.record.charge >= capacity * (1.0 - FULL) {
                    v.record.charge = capacity;
                    v.record.departure = Some(done);
                    self.occupancy.remove(v.index);
                    self.completed.push(v.record);
                    self.changed = true;
                } else {
                    kept.push(v);
                }
            }
            self.active = kept;
        }
        self.step_index += 1;
        Ok(point)
    }

    pub fn finish(self, series: Vec<SeriesPoint>) -> RunOutput {
        RunOutput {
            series,
            completed: self.completed,
            pending: self.active.into_iter().map(|a| a.record).collect(),
            stats: self.stats,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub series: Vec<SeriesPoint>,
    /// Vehicles that left fully charged, in departure order.
    pub completed: Vec<VehicleRecord>,
    /// Vehicles still charging at the horizon.
    pub pending: Vec<VehicleRecord>,
    pub stats: SolverStats,
}

/// Runs from an empty network until the clock reaches the horizon.
pub fn run(tree: &RootedTree, idx: &SubtreeIndex, config: &SimulationConfig) -> Result<RunOutput, SimulationError> {
    let mut sim = Simulation::new(tree, idx, config.clone())?;
    let steps = config.steps();
    let mut series = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        series.push(sim.step()?);
    }
    Ok(sim.finish(series))
}

pub const SERIES_HEADER: &str = "time,N,aggregate_power,objective";
pub const VEHICLES_HEADER: &str = "id,node,arrival,departure,charging_time";

impl RunOutput {
    pub fn series_csv(&self) -> String {
        let mut out = String::with_capacity(32 * self.series.len());
        out.push_str(SERIES_HEADER);
        out.push('\n');
        for p in &self.series {
            let _ = writeln!(out, "{},{},{},{}", p.time, p.vehicles, p.aggregate_power, p.objective);
        }
        out
    }

    /// Completed vehicles by id, then pending ones with empty departure
    /// and charging time.
    pub fn vehicles_csv(&self) -> String {
        let mut rows: Vec<&VehicleRecord> = self.completed.iter().chain(&self.pending).collect();
        rows.sort_by_key(|v| v.id);
        let mut out = String::from(VEHICLES_HEADER);
        out.push('\n');
        for v in rows {
            match v.departure {
                Some(d) => {
                    let _ = writeln!(out, "{},{},{},{},{}", v.id, v.node, v.arrival, d, d - v.arrival);
                }
                None => {
                    let _ = writeln!(out, "{},{},{},,", v.id, v.node, v.arrival);
                }
            }
        }
        out
    }
}

fn fields<'t>(what: &'static str, text: &'t str, header: &str) -> Result<Vec<(usize, Vec<&'t str>)>, SimulationError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty());
    match lines.next() {
        Some((_, h)) if h == header => {}
        _ => return Err(SimulationError::Parse { what, line: 1, message: format!("expected header `{header}`") }),
    }
    let width = header.split(',').count();
    lines
        .map(|(n, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() == width {
                Ok((n, f))
            } else {
                Err(SimulationError::Parse { what, line: n, message: format!("expected {width} fields") })
            }
        })
        .collect()
}

fn num<T: std::str::FromStr>(what: &'static str, line: usize, s: &str) -> Result<T, SimulationError> {
    s.parse().map_err(|_| SimulationError::Parse { what, line, message: format!("bad value `{s}`") })
}

pub fn parse_series(text: &str) -> Result<Vec<SeriesPoint>, SimulationError> {
    const W: &str = "series";
    fields(W, text, SERIES_HEADER)?
        .into_iter()
        .map(|(n, f)| {
            Ok(SeriesPoint {
                time: num(W, n, f[0])?,
                vehicles: num(W, n, f[1])?,
                aggregate_power: num(W, n, f[2])?,
                objective: num(W, n, f[3])?,
            })
        })
        .collect()
}

/// Reads `vehicles.csv`. Charge is not stored in the file; completed
/// vehicles are reported full (`charge = 1`) and pending ones empty.
pub fn parse_vehicles(text: &str) -> Result<Vec<VehicleRecord>, SimulationError> {
    const W: &str = "vehicles";
    fields(W, text, VEHICLES_HEADER)?
        .into_iter()
        .map(|(n, f)| {
            let departure = if f[3].is_empty() { None } else { Some(num(W, n, f[3])?) };
            Ok(VehicleRecord {
                id: num(W, n, f[0])?,
                node: num(W, n, f[1])?,
                arrival: num(W, n, f[2])?,
                charge: if departure.is_some() { 1.0 } else { 0.0 },
                departure,
            })
        })
        .collect()
}

/// Vehicle counts per node at the start of step `step_index`, after
/// admission, reconstructed from vehicle records.
pub fn occupancy_at(tree: &RootedTree, vehicles: &[VehicleRecord], step: f64, step_index: u64) -> Option<Occupancy> {
    let t = step_index as f64 * step;
    let end = t + step;
    let mut occ = Occupancy::empty(tree);
    for v in vehicles {
        let admitted = v.arrival < end;
        let present = v.departure.map_or(true, |d| d > t);
        if admitted && present {
            occ.add(tree.index_of(v.node)?);
        }
    }
    Some(occ)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{parse_network, subtree_index, validate_tree};

    fn single_edge() -> RootedTree {
        validate_tree(&parse_network("# root=1 voltage=1\n1,2,0.01,0.01\n").unwrap()).unwrap()
    }

    #[test]
    fn zero_rate_never_arrives() {
        let tree = single_edge();
        assert!(sample_arrivals(&tree, 0.0, 3, 0, 1e9).is_empty());
    }

    #[test]
    fn config_validation() {
        let ok = SimulationConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            SimulationConfig { lambda: -1.0, ..ok.clone() },
            SimulationConfig { horizon: 0.0, ..ok.clone() },
            SimulationConfig { step: -0.5, ..ok.clone() },
            SimulationConfig { battery: 0.0, ..ok.clone() },
            SimulationConfig { alpha: 1.0, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn steps_round_up() {
        let c = SimulationConfig { horizon: 10.0, step: 3.0, ..Default::default() };
        assert_eq!(c.steps(), 4);
    }

    #[test]
    fn empty_network_does_not_solve() {
        let tree = single_edge();
        let idx = subtree_index(&tree);
        let cfg = SimulationConfig { lambda: 0.0, horizon: 5.0, ..Default::default() };
        let out = run(&tree, &idx, &cfg).unwrap();
        assert_eq!(out.stats.solves, 0);
        assert_eq!(out.series.len(), 5);
        assert!(out.series.iter().all(|p| p.vehicles == 0 && p.aggregate_power == 0.0));
    }

    #[test]
    fn csv_round_trip() {
        let tree = single_edge();
        let idx = subtree_index(&tree);
        let cfg = SimulationConfig { lambda: 0.7, horizon: 50.0, seed: 5, ..Default::default() };
        let out = run(&tree, &idx, &cfg).unwrap();
        let series = parse_series(&out.series_csv()).unwrap();
        assert_eq!(series, out.series);
        let vehicles = parse_vehicles(&out.vehicles_csv()).unwrap();
        assert_eq!(vehicles.len(), out.completed.len() + out.pending.len());
        assert!(parse_series("time,N\n1,2\n").is_err());
    }
}
