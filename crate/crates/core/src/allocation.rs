//! Max-flow and proportional-fairness allocation on a distribution tree.
//!
//! Voltages enter through the lifted variables `W_ii = V_i^2` and
//! `W_ij = V_i V_j`. Each edge `(p, k)` contributes the voltage-drop equality
//!
//! ```text
//!     W_pk - W_kk - R_k P_sub(k) - X_k Q_sub(k) = 0
//! ```
//!
//! and the rotated cone `W_pp W_kk >= W_pk^2`, which is the 2x2 PSD
//! condition with the rank-one requirement dropped. Rank-one exactness is
//! checked after every solve.
//!
//! Vehicles sharing a node are aggregated into one power variable `P_i`
//! and split equally afterwards. For proportional fairness the objective is
//! `sum_i w_i log P_i`; the per-vehicle utility `sum_l log P_l` differs from
//! it by the constant `-sum_i w_i log w_i`, which is left out of every
//! reported objective (see [`AllocationResult::per_vehicle_utility`]).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use gridcharge_conic::{ConicError, ConicProblem, Solution, SolverConfig, Status};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netmodel::{NodeId, RootedTree, SubtreeIndex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "mf")]
    MaxFlow,
    #[serde(rename = "pf")]
    ProportionalFairness,
}

impl Algorithm {
    pub fn short_name(self) -> &'static str {
        match self {
            Algorithm::MaxFlow => "mf",
            Algorithm::ProportionalFairness => "pf",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mf" | "maxflow" | "max-flow" => Ok(Algorithm::MaxFlow),
            "pf" | "propfair" | "proportional-fairness" => Ok(Algorithm::ProportionalFairness),
            other => Err(format!("unknown algorithm `{other}` (expected mf or pf)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum AllocationError {
    #[error("no vehicles on the network")]
    EmptyOccupancy,
    #[error("alpha must lie in (0, 1), got {0}")]
    BadAlpha(f64),
    #[error("nominal voltage must be positive and finite, got {0}")]
    BadVoltage(f64),
    #[error("occupancy has {got} entries but the tree has {expected} nodes")]
    OccupancySize { expected: usize, got: usize },
    #[error("vehicles cannot charge at the root node")]
    RootOccupied,
    #[error("node {0} is not in the network")]
    UnknownNode(NodeId),
    #[error("{0} weights given for {1} nodes")]
    WeightCount(usize, usize),
    #[error("weights must be finite")]
    BadWeight,
    #[error(transparent)]
    Conic(#[from] ConicError),
    #[error("solver returned {status:?} (residuals {residual:.3e})")]
    NotOptimal { status: Status, residual: f64, dump: String },
    #[error("relaxation is not exact: max relative rank-one gap {gap:.3e} on edge into node {node}")]
    Inexact { gap: f64, node: NodeId, dump: String },
    #[error("recovered allocation is inconsistent: {0}")]
    Inconsistent(String),
    #[error("proportional-fairness allocation has zero power for a vehicle at node {0}")]
    ZeroPower(NodeId),
}

impl AllocationError {
    /// Problem dump in the conic text format, for failures raised by a solve.
    pub fn dump(&self) -> Option<&str> {
        match self {
            AllocationError::NotOptimal { dump, .. } | AllocationError::Inexact { dump, .. } => Some(dump),
            _ => None,
        }
    }
}

/// Vehicle counts per node, indexed like the tree.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Occupancy {
    counts: Vec<u32>,
}

impl Occupancy {
    pub fn empty(tree: &RootedTree) -> Self {
        Self { counts: vec![0; tree.len()] }
    }

    pub fn from_counts(counts: Vec<u32>) -> Result<Self, AllocationError> {
        if counts.first().copied().unwrap_or(0) != 0 {
            return Err(AllocationError::RootOccupied);
        }
        Ok(Self { counts })
    }

    pub fn from_ids(tree: &RootedTree, counts: &BTreeMap<NodeId, u32>) -> Result<Self, AllocationError> {
        let mut occ = Self::empty(tree);
        for (&id, &c) in counts {
            let k = tree.index_of(id).ok_or(AllocationError::UnknownNode(id))?;
            occ.counts[k] = c;
        }
        Self::from_counts(occ.counts)
    }

    pub fn count(&self, k: usize) -> u32 {
        self.counts[k]
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|c| u64::from(*c)).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.iter().all(|c| *c == 0)
    }

    pub fn add(&mut self, k: usize) {
        self.counts[k] += 1;
    }

    pub fn remove(&mut self, k: usize) {
        self.counts[k] -= 1;
    }

    /// Indices of nodes with at least one vehicle.
    pub fn occupied(&self) -> impl Iterator<Item = usize> + '_ {
        self.counts.iter().enumerate().filter(|(_, c)| **c > 0).map(|(k, _)| k)
    }

    fn check(&self, tree: &RootedTree) -> Result<(), AllocationError> {
        if self.counts.len() != tree.len() {
            return Err(AllocationError::OccupancySize { expected: tree.len(), got: self.counts.len() });
        }
        if self.counts[0] != 0 {
            return Err(AllocationError::RootOccupied);
        }
        Ok(())
    }
}

/// Which nodes get variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Formulation {
    /// Only the root and nodes with a vehicle somewhere below them. Other
    /// nodes carry no current and sit at their parent's voltage.
    #[default]
    ActiveSubtree,
    /// Every node and edge of the tree.
    Full,
}

/// How vehicles map to power variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    /// One variable per occupied node, split equally among its vehicles.
    #[default]
    PerNode,
    /// One variable per vehicle.
    PerVehicle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationConfig {
    pub alpha: f64,
    pub nominal_voltage: f64,
    /// Fix the root at the nominal voltage instead of leaving it in the box.
    pub pin_root: bool,
    pub formulation: Formulation,
    pub aggregation: Aggregation,
    pub solver: SolverConfig,
    /// Maximum relative rank-one gap accepted by the exactness check.
    pub exactness_tolerance: f64,
    /// Solver tolerance for the single retry after a failed exactness check.
    pub retry_tolerance: f64,
}

impl Default for AllocationConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            nominal_voltage: 1.0,
            pin_root: false,
            formulation: Formulation::default(),
            aggregation: Aggregation::default(),
            solver: SolverConfig::default(),
            exactness_tolerance: 1e-6,
            retry_tolerance: 1e-10,
        }
    }
}

impl AllocationConfig {
    fn check(&self) -> Result<(), AllocationError> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(AllocationError::BadAlpha(self.alpha));
        }
        if !(self.nominal_voltage > 0.0 && self.nominal_voltage.is_finite()) {
            return Err(AllocationError::BadVoltage(self.nominal_voltage));
        }
        Ok(())
    }

    fn voltage_box(&self) -> (f64, f64) {
        (
            (1.0 - self.alpha) * self.nominal_voltage,
            (1.0 + self.alpha) * self.nominal_voltage,
        )
    }
}

/// Sparse linear form `sum coeff * x[var]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinearExpr {
    terms: BTreeMap<usize, f64>,
}

impl LinearExpr {
    pub fn add(&mut self, var: usize, coeff: f64) {
        *self.terms.entry(var).or_insert(0.0) += coeff;
    }

    pub fn terms(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.terms.iter().map(|(v, c)| (*v, *c))
    }

    pub fn coeff(&self, var: usize) -> f64 {
        self.terms.get(&var).copied().unwrap_or(0.0)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|(v, c)| c * x[*v]).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }
}

/// A power variable and the node it draws from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Consumer {
    pub node: usize,
    pub var: usize,
    /// Vehicles represented by this variable.
    pub vehicles: u32,
}

/// Variable indices of the W entries and power variables.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    /// `W_kk`, for nodes that have variables.
    pub w_diag: Vec<Option<usize>>,
    /// `W_pk` for the edge entering `k`.
    pub w_edge: Vec<Option<usize>>,
    pub consumers: Vec<Consumer>,
    pub num_vars: usize,
}

impl Layout {
    fn new(tree: &RootedTree, idx: &SubtreeIndex, occ: &Occupancy, cfg: &AllocationConfig) -> Self {
        let n = tree.len();
        let active: Vec<bool> = match cfg.formulation {
            Formulation::Full => vec![true; n],
            Formulation::ActiveSubtree => {
                (0..n).map(|k| k == 0 || idx.nodes(k).iter().any(|i| occ.count(*i) > 0)).collect()
            }
        };
        let mut next = 0;
        let mut take = || {
            next += 1;
            next - 1
        };
        let w_diag: Vec<Option<usize>> = active.iter().map(|a| a.then(&mut take)).collect();
        let w_edge: Vec<Option<usize>> = (0..n).map(|k| (k > 0 && active[k]).then(&mut take)).collect();
        let mut consumers = Vec::new();
        for k in occ.occupied() {
            match cfg.aggregation {
                Aggregation::PerNode => consumers.push(Consumer { node: k, var: take(), vehicles: occ.count(k) }),
                Aggregation::PerVehicle => {
                    for _ in 0..occ.count(k) {
                        consumers.push(Consumer { node: k, var: take(), vehicles: 1 });
                    }
                }
            }
        }
        Self { w_diag, w_edge, consumers, num_vars: next }
    }

    pub fn is_active(&self, k: usize) -> bool {
        self.w_diag[k].is_some()
    }

    /// Active-power loss on the edge entering `k`, as a linear form in W.
    pub fn loss_expr(&self, tree: &RootedTree, k: usize) -> Option<(LinearExpr, LinearExpr)> {
        let p = tree.parent(k)?;
        let (wpp, wpk, wkk) = (self.w_diag[p]?, self.w_edge[k]?, self.w_diag[k]?);
        let (r, x) = (tree.resistance(k), tree.reactance(k));
        let z2 = r * r + x * x;
        let mut lp = LinearExpr::default();
        let mut lq = LinearExpr::default();
        for (var, c) in [(wpp, 1.0), (wpk, -2.0), (wkk, 1.0)] {
            lp.add(var, c * r / z2);
            lq.add(var, c * x / z2);
        }
        Some((lp, lq))
    }
}

/// `(P_sub(j), Q_sub(j))`: load plus losses of the subtree rooted at `j`,
/// as linear forms in the problem variables.
pub fn subtree_expressions(tree: &RootedTree, idx: &SubtreeIndex, layout: &Layout, j: usize) -> (LinearExpr, LinearExpr) {
    let mut p = LinearExpr::default();
    let mut q = LinearExpr::default();
    for c in &layout.consumers {
        if idx.contains(j, c.node) {
            p.add(c.var, 1.0);
        }
    }
    for &k in idx.edges(j) {
        if let Some((lp, lq)) = layout.loss_expr(tree, k) {
            lp.terms().for_each(|(v, a)| p.add(v, a));
            lq.terms().for_each(|(v, a)| q.add(v, a));
        }
    }
    (p, q)
}

#[derive(Debug, Clone, PartialEq)]
enum Objective {
    Sum,
    Log,
    /// Per-node weights on the node power.
    Weighted(Vec<f64>),
}

/// An assembled allocation problem together with its variable map.
#[derive(Debug, Clone)]
pub struct Model {
    pub problem: ConicProblem,
    pub layout: Layout,
    pub algorithm: Option<Algorithm>,
    pub counts: Vec<u32>,
    pub alpha: f64,
    pub nominal_voltage: f64,
    subtree_p: Vec<LinearExpr>,
    subtree_q: Vec<LinearExpr>,
}

/// Max-flow problem: maximize total vehicle power.
pub fn build_maxflow(tree: &RootedTree, idx: &SubtreeIndex, occ: &Occupancy, cfg: &AllocationConfig) -> Result<Model, AllocationError> {
    build(tree, idx, occ, cfg, Objective::Sum)
}

/// Proportional-fairness problem: maximize `sum_i w_i log P_i`.
pub fn build_propfair(tree: &RootedTree, idx: &SubtreeIndex, occ: &Occupancy, cfg: &AllocationConfig) -> Result<Model, AllocationError> {
    build(tree, idx, occ, cfg, Objective::Log)
}

/// Same feasible set with objective `sum_i weights[i] P_i`, `weights` indexed
/// like the tree.
pub fn build_weighted(
    tree: &RootedTree,
    idx: &SubtreeIndex,
    occ: &Occupancy,
    cfg: &AllocationConfig,
    weights: &[f64],
) -> Result<Model, AllocationError> {
    if weights.len() != tree.len() {
        return Err(AllocationError::WeightCount(weights.len(), tree.len()));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(AllocationError::BadWeight);
    }
    build(tree, idx, occ, cfg, Objective::Weighted(weights.to_vec()))
}

pub fn build_for(
    algorithm: Algorithm,
    tree: &RootedTree,
    idx: &SubtreeIndex,
    occ: &Occupancy,
    cfg: &AllocationConfig,
) -> Result<Model, AllocationError> {
    match algorithm {
        Algorithm::MaxFlow => build_maxflow(tree, idx, occ, cfg),
        Algorithm::ProportionalFairness => build_propfair(tree, idx, occ, cfg),
    }
}

fn build(
    tree: &RootedTree,
    idx: &SubtreeIndex,
    occ: &Occupancy,
    cfg: &AllocationConfig,
    objective: Objective,
) -> Result<Model, AllocationError> {
    cfg.check()?;
    occ.check(tree)?;
    if occ.is_empty() {
        return Err(AllocationError::EmptyOccupancy);
    }
    let layout = Layout::new(tree, idx, occ, cfg);
    let mut problem = ConicProblem::new(layout.num_vars);
    let (lo, hi) = cfg.voltage_box();
    for (k, var) in layout.w_diag.iter().enumerate() {
        if let Some(v) = *var {
            problem.set_bounds(v, lo * lo, hi * hi);
            if k == 0 && cfg.pin_root {
                let v2 = cfg.nominal_voltage * cfg.nominal_voltage;
                problem.add_equality(vec![(v, 1.0)], v2);
            }
        }
    }
    for c in &layout.consumers {
        problem.set_bounds(c.var, 0.0, f64::INFINITY);
        match &objective {
            Objective::Sum => {
                problem.set_objective(c.var, 1.0);
            }
            Objective::Log => {
                problem.add_log_term(c.var, f64::from(c.vehicles));
            }
            Objective::Weighted(w) => {
                problem.set_objective(c.var, w[c.node]);
            }
        }
    }

    let n = tree.len();
    let mut subtree_p = vec![LinearExpr::default(); n];
    let mut subtree_q = vec![LinearExpr::default(); n];
    for j in 0..n {
        if layout.is_active(j) {
            (subtree_p[j], subtree_q[j]) = subtree_expressions(tree, idx, &layout, j);
        }
    }
    for k in tree.edges() {
        let (Some(wpk), Some(wkk)) = (layout.w_edge[k], layout.w_diag[k]) else {
            continue;
        };
        let wpp = layout.w_diag[tree.parent(k).unwrap()].expect("parent of an active node is active");
        let mut row = LinearExpr::default();
        row.add(wpk, 1.0);
        row.add(wkk, -1.0);
        subtree_p[k].terms().for_each(|(v, a)| row.add(v, -tree.resistance(k) * a));
        subtree_q[k].terms().for_each(|(v, a)| row.add(v, -tree.reactance(k) * a));
        problem.add_equality(row.terms().filter(|(_, a)| *a != 0.0).collect(), 0.0);
        problem.add_cone(wpp, wkk, wpk);
    }

    let algorithm = match objective {
        Objective::Sum => Some(Algorithm::MaxFlow),
        Objective::Log => Some(Algorithm::ProportionalFairness),
        Objective::Weighted(_) => None,
    };
    Ok(Model {
        problem,
        layout,
        algorithm,
        counts: occ.counts().to_vec(),
        alpha: cfg.alpha,
        nominal_voltage: cfg.nominal_voltage,
        subtree_p,
        subtree_q,
    })
}

impl Model {
    /// Full W entries from a solution vector. Nodes without variables take
    /// their parent's voltage, so `W_kk = W_pk = W_pp` there.
    pub fn w_entries(&self, tree: &RootedTree, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = tree.len();
        let mut diag = vec![0.0; n];
        let mut edge = vec![0.0; n];
        for k in 0..n {
            match (self.layout.w_diag[k], tree.parent(k)) {
                (Some(v), _) => diag[k] = x[v],
                (None, Some(p)) => diag[k] = diag[p],
                (None, None) => unreachable!("root always has a variable"),
            }
            if let Some(p) = tree.parent(k) {
                edge[k] = match self.layout.w_edge[k] {
                    Some(v) => x[v],
                    None => diag[p],
                };
            }
        }
        (diag, edge)
    }

    pub fn node_powers(&self, n: usize, x: &[f64]) -> Vec<f64> {
        let mut power = vec![0.0; n];
        for c in &self.layout.consumers {
            power[c.node] += x[c.var];
        }
        power
    }

    pub fn subtree_p(&self, k: usize) -> &LinearExpr {
        &self.subtree_p[k]
    }

    pub fn subtree_q(&self, k: usize) -> &LinearExpr {
        &self.subtree_q[k]
    }

    pub fn solve(&self, solver: &SolverConfig) -> Result<Solution, AllocationError> {
        let solution = gridcharge_conic::solve(&self.problem, solver)?;
        if solution.status != Status::Optimal {
            return Err(AllocationError::NotOptimal {
                status: solution.status,
                residual: solution.residuals.max(),
                dump: self.problem.to_dump(),
            });
        }
        Ok(solution)
    }
}

/// Per-edge rank-one gaps `W_pp W_kk - W_pk^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactnessCertificate {
    /// Indexed by the downstream node; zero for the root.
    pub gaps: Vec<f64>,
    /// `|gap| / (W_pp W_kk)` per edge.
    pub relative_gaps: Vec<f64>,
    pub max_relative_gap: f64,
    /// Edge (downstream node index) attaining the maximum.
    pub worst_edge: Option<usize>,
    pub tolerance: f64,
    pub passed: bool,
}

/// Checks rank-one exactness of the W entries of every edge.
pub fn certify_exactness(tree: &RootedTree, w_diag: &[f64], w_edge: &[f64], tolerance: f64) -> ExactnessCertificate {
    let n = tree.len();
    let mut gaps = vec![0.0; n];
    let mut relative_gaps = vec![0.0; n];
    let mut worst: Option<(usize, f64)> = None;
    for k in tree.edges() {
        let p = tree.parent(k).unwrap();
        let scale = w_diag[p] * w_diag[k];
        gaps[k] = scale - w_edge[k] * w_edge[k];
        relative_gaps[k] = if scale > 0.0 { gaps[k].abs() / scale } else { f64::INFINITY };
        if worst.map_or(true, |(_, g)| relative_gaps[k] > g || relative_gaps[k].is_nan()) {
            worst = Some((k, relative_gaps[k]));
        }
    }
    let max_relative_gap = worst.map_or(0.0, |(_, g)| g);
    ExactnessCertificate {
        gaps,
        relative_gaps,
        max_relative_gap,
        worst_edge: worst.map(|(k, _)| k),
        tolerance,
        passed: max_relative_gap <= tolerance,
    }
}

/// Allocation recovered from a solved model.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationResult {
    pub algorithm: Option<Algorithm>,
    pub counts: Vec<u32>,
    /// `P_i` per node; zero where there are no vehicles.
    pub node_power: Vec<f64>,
    pub voltage: Vec<f64>,
    pub w_diag: Vec<f64>,
    /// `W_pk` for the edge entering each node; zero for the root.
    pub w_edge: Vec<f64>,
    /// `P_sub(k)`; for the root this is the injected power.
    pub subtree_p: Vec<f64>,
    pub subtree_q: Vec<f64>,
    /// Losses on the edge entering each node.
    pub loss_p: Vec<f64>,
    pub loss_q: Vec<f64>,
    /// Solver-reported objective.
    pub objective: f64,
    pub alpha: f64,
    pub nominal_voltage: f64,
}

impl AllocationResult {
    /// The allocation for an empty network: no power, every node at nominal
    /// voltage, objective zero.
    pub fn idle(tree: &RootedTree, algorithm: Algorithm, cfg: &AllocationConfig) -> Self {
        let n = tree.len();
        let v = cfg.nominal_voltage;
        let mut w_edge = vec![v * v; n];
        w_edge[0] = 0.0;
        Self {
            algorithm: Some(algorithm),
            counts: vec![0; n],
            node_power: vec![0.0; n],
            voltage: vec![v; n],
            w_diag: vec![v * v; n],
            w_edge,
            subtree_p: vec![0.0; n],
            subtree_q: vec![0.0; n],
            loss_p: vec![0.0; n],
            loss_q: vec![0.0; n],
            objective: 0.0,
            alpha: cfg.alpha,
            nominal_voltage: v,
        }
    }

    /// Power per vehicle at node `k`, `P_k / w_k`.
    pub fn vehicle_power(&self, k: usize) -> Option<f64> {
        (self.counts[k] > 0).then(|| self.node_power[k] / f64::from(self.counts[k]))
    }

    /// One entry per vehicle, grouped by node in index order.
    pub fn vehicle_powers(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (k, &c) in self.counts.iter().enumerate() {
            if let Some(p) = self.vehicle_power(k) {
                out.extend(std::iter::repeat(p).take(c as usize));
            }
        }
        out
    }

    pub fn aggregate_power(&self) -> f64 {
        self.node_power.iter().sum()
    }

    pub fn root_injection(&self) -> f64 {
        self.subtree_p[0]
    }

    pub fn total_loss(&self) -> f64 {
        self.loss_p.iter().sum()
    }

    /// `sum_i w_i log P_i` over occupied nodes.
    pub fn log_utility(&self) -> f64 {
        self.counts
            .iter()
            .zip(&self.node_power)
            .filter(|(c, _)| **c > 0)
            .map(|(c, p)| f64::from(*c) * p.ln())
            .sum()
    }

    /// `sum_l log P_l`, the utility before aggregation.
    pub fn per_vehicle_utility(&self) -> f64 {
        self.log_utility()
            - self.counts.iter().filter(|c| **c > 0).map(|c| f64::from(*c) * f64::from(*c).ln()).sum::<f64>()
    }

    /// Objective recomputed from the allocation.
    pub fn recomputed_objective(&self) -> Option<f64> {
        match self.algorithm? {
            Algorithm::MaxFlow => Some(self.aggregate_power()),
            Algorithm::ProportionalFairness => Some(self.log_utility()),
        }
    }

    pub fn certificate(&self, tree: &RootedTree, tolerance: f64) -> ExactnessCertificate {
        certify_exactness(tree, &self.w_diag, &self.w_edge, tolerance)
    }

    /// `V_p V_k - V_k^2 - R P_sub(k) - X Q_sub(k)` per edge.
    pub fn drop_residuals(&self, tree: &RootedTree) -> Vec<f64> {
        let mut out = vec![0.0; tree.len()];
        for k in tree.edges() {
            let p = tree.parent(k).unwrap();
            out[k] = self.voltage[p] * self.voltage[k]
                - self.voltage[k] * self.voltage[k]
                - tree.resistance(k) * self.subtree_p[k]
                - tree.reactance(k) * self.subtree_q[k];
        }
        out
    }
}

/// Reads the allocation out of a solution and checks it: equal split per
/// node, voltages in the box, `|V_p V_k - W_pk|` and the voltage-drop
/// residuals within `1e-6` (scaled by `V_nominal^2`).
pub fn recover(tree: &RootedTree, model: &Model, solution: &Solution) -> Result<AllocationResult, AllocationError> {
    if solution.status != Status::Optimal {
        return Err(AllocationError::NotOptimal {
            status: solution.status,
            residual: solution.residuals.max(),
            dump: model.problem.to_dump(),
        });
    }
    let x = &solution.x;
    let n = tree.len();
    let (w_diag, w_edge) = model.w_entries(tree, x);
    let node_power = model.node_powers(n, x);
    let voltage: Vec<f64> = w_diag.iter().map(|w| w.max(0.0).sqrt()).collect();
    let mut subtree_p = vec![0.0; n];
    let mut subtree_q = vec![0.0; n];
    let mut loss_p = vec![0.0; n];
    let mut loss_q = vec![0.0; n];
    for k in 0..n {
        if model.layout.is_active(k) {
            subtree_p[k] = model.subtree_p[k].eval(x);
            subtree_q[k] = model.subtree_q[k].eval(x);
            if let Some((lp, lq)) = model.layout.loss_expr(tree, k) {
                loss_p[k] = lp.eval(x);
                loss_q[k] = lq.eval(x);
            }
        }
    }
    let result = AllocationResult {
        algorithm: model.algorithm,
        counts: model.counts.clone(),
        node_power,
        voltage,
        w_diag,
        w_edge,
        subtree_p,
        subtree_q,
        loss_p,
        loss_q,
        objective: solution.objective,
        alpha: model.alpha,
        nominal_voltage: model.nominal_voltage,
    };
    check_consistency(tree, &result)?;
    Ok(result)
}

const CONSISTENCY_TOL: f64 = 1e-6;

fn check_consistency(tree: &RootedTree, r: &AllocationResult) -> Result<(), AllocationError> {
    let scale = r.nominal_voltage * r.nominal_voltage;
    let tol = CONSISTENCY_TOL * scale;
    let (lo, hi) = ((1.0 - r.alpha) * r.nominal_voltage, (1.0 + r.alpha) * r.nominal_voltage);
    for k in 0..tree.len() {
        let v = r.voltage[k];
        if v < lo - CONSISTENCY_TOL * r.nominal_voltage || v > hi + CONSISTENCY_TOL * r.nominal_voltage {
            return Err(AllocationError::Inconsistent(format!(
                "voltage {v} at node {} outside [{lo}, {hi}]",
                tree.id(k)
            )));
        }
        if r.counts[k] > 0 && r.node_power[k] < -tol {
            return Err(AllocationError::Inconsistent(format!(
                "negative power {} at node {}",
                r.node_power[k],
                tree.id(k)
            )));
        }
    }
    let residuals = r.drop_residuals(tree);
    for k in tree.edges() {
        let p = tree.parent(k).unwrap();
        let cross = (r.voltage[p] * r.voltage[k] - r.w_edge[k]).abs();
        if cross > tol {
            return Err(AllocationError::Inconsistent(format!(
                "|V_i V_j - W_ij| = {cross:.3e} on edge {}-{}",
                tree.id(p),
                tree.id(k)
            )));
        }
        if residuals[k].abs() > tol {
            return Err(AllocationError::Inconsistent(format!(
                "voltage-drop residual {:.3e} on edge {}-{}",
                residuals[k],
                tree.id(p),
                tree.id(k)
            )));
        }
    }
    Ok(())
}

/// A checked allocation and what it took to get it.
#[derive(Debug, Clone)]
pub struct Allocation {
    pub result: AllocationResult,
    pub certificate: ExactnessCertificate,
    pub solves: usize,
    /// Set when the first solve failed the exactness check and the retry at
    /// tighter tolerance passed.
    pub retried: bool,
    pub iterations: usize,
}

/// Builds, solves, certifies and recovers. An empty network yields
/// [`AllocationResult::idle`] without a solve. A failed exactness check is
/// retried once at `cfg.retry_tolerance`; a second failure is an error
/// carrying the problem dump.
pub fn allocate(
    tree: &RootedTree,
    idx: &SubtreeIndex,
    occ: &Occupancy,
    algorithm: Algorithm,
    cfg: &AllocationConfig,
) -> Result<Allocation, AllocationError> {
    cfg.check()?;
    occ.check(tree)?;
    if occ.is_empty() {
        let result = AllocationResult::idle(tree, algorithm, cfg);
        let certificate = result.certificate(tree, cfg.exactness_tolerance);
        return Ok(Allocation { result, certificate, solves: 0, retried: false, iterations: 0 });
    }
    let model = build_for(algorithm, tree, idx, occ, cfg)?;
    let mut solution = model.solve(&cfg.solver)?;
    let mut iterations = solution.iterations;
    let (d, e) = model.w_entries(tree, &solution.x);
    let mut certificate = certify_exactness(tree, &d, &e, cfg.exactness_tolerance);
    let mut solves = 1;
    let mut retried = false;
    if !certificate.passed {
        let tight = cfg.solver.clone().with_tolerance(cfg.retry_tolerance.min(cfg.solver.tolerance));
        if let Ok(again) = model.solve(&tight) {
            let (d, e) = model.w_entries(tree, &again.x);
            certificate = certify_exactness(tree, &d, &e, cfg.exactness_tolerance);
            iterations += again.iterations;
            solution = again;
        }
        solves += 1;
        retried = true;
        if !certificate.passed {
            let k = certificate.worst_edge.unwrap_or(0);
            return Err(AllocationError::Inexact {
                gap: certificate.max_relative_gap,
                node: tree.id(k),
                dump: model.problem.to_dump(),
            });
        }
    }
    let result = recover(tree, &model, &solution)?;
    if algorithm == Algorithm::ProportionalFairness {
        if let Some(k) = occ.occupied().find(|k| result.node_power[*k] <= 0.0) {
            return Err(AllocationError::ZeroPower(tree.id(k)));
        }
    }
    Ok(Allocation { result, certificate, solves, retried, iterations })
}

/// `sum_l (alt_l - pf_l) / pf_l` over per-vehicle powers.
pub fn proportional_change(pf: &[f64], alt: &[f64]) -> Result<f64, AllocationError> {
    assert_eq!(pf.len(), alt.len(), "allocations cover different vehicle sets");
    let mut total = 0.0;
    for (k, (p, a)) in pf.iter().zip(alt).enumerate() {
        if *p <= 0.0 {
            return Err(AllocationError::ZeroPower(k as NodeId));
        }
        total += (a - p) / p;
    }
    Ok(total)
}

/// True when `alt` does not improve on `pf` in aggregate proportional terms:
/// `sum_l (P_l^alt - P_l^pf) / P_l^pf <= tol`.
pub fn certify_proportional_fairness(pf: &AllocationResult, alt: &AllocationResult, tol: f64) -> Result<bool, AllocationError> {
    assert_eq!(pf.counts, alt.counts, "allocations are for different occupancies");
    let mut total = 0.0;
    for (k, &c) in pf.counts.iter().enumerate() {
        if c == 0 {
            continue;
        }
        if pf.node_power[k] <= 0.0 {
            return Err(AllocationError::ZeroPower(k as NodeId));
        }
        total += f64::from(c) * (alt.node_power[k] - pf.node_power[k]) / pf.node_power[k];
    }
    Ok(total <= tol)
}
