//! Distribution tree: file format, validation and subtree indexing.
//!
//! Network files are UTF-8 CSV edge lists:
//!
//! ```text
//! # root=1 voltage=1.0 pv=13,17
//! 1,2,0.01,0.02
//! 2,3,0.015,0.01
//! ```
//!
//! The first non-blank line is the header. `root` defaults to 1 and
//! `voltage` to 1.0; any other `key=value` pairs are kept as metadata. Every
//! later line starting with `#` is a comment. An edge line is
//! `from,to,resistance,reactance` in per-unit; a line holding a single id
//! declares a node without edges.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt::Write as _;

use thiserror::Error;

pub type NodeId = u32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("missing header line `# root=<id> voltage=<float>`")]
    MissingHeader,
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: duplicate edge {from}-{to}")]
    DuplicateEdge { line: usize, from: NodeId, to: NodeId },
    #[error("line {line}: negative impedance on edge {from}-{to}")]
    NegativeImpedance { line: usize, from: NodeId, to: NodeId },
    #[error("line {line}: edge {from}-{to} has zero impedance")]
    ZeroImpedance { line: usize, from: NodeId, to: NodeId },
    #[error("edge {from}-{to} has invalid impedance ({resistance}, {reactance})")]
    BadImpedance { from: NodeId, to: NodeId, resistance: f64, reactance: f64 },
    #[error("node {0} is referenced but not declared")]
    UnknownNode(NodeId),
    #[error("root {0} is not a node of the network")]
    MissingRoot(NodeId),
    #[error("nominal voltage must be positive and finite, got {0}")]
    BadVoltage(f64),
    #[error("cycle detected through node {0}")]
    Cycle(NodeId),
    #[error("node {0} is not connected to the root")]
    Disconnected(NodeId),
    #[error("cannot remove the root node {0}")]
    RemoveRoot(NodeId),
    #[error("removing the requested nodes disconnects node {0}")]
    PruneDisconnects(NodeId),
    #[error("node {0} does not exist")]
    NoSuchNode(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeSpec {
    pub from: NodeId,
    pub to: NodeId,
    pub resistance: f64,
    pub reactance: f64,
}

impl EdgeSpec {
    pub fn new(from: NodeId, to: NodeId, resistance: f64, reactance: f64) -> Self {
        Self { from, to, resistance, reactance }
    }

    fn check(&self) -> Result<(), NetworkError> {
        let (r, x) = (self.resistance, self.reactance);
        if !(r.is_finite() && x.is_finite() && r >= 0.0 && x >= 0.0 && r + x > 0.0) {
            return Err(NetworkError::BadImpedance { from: self.from, to: self.to, resistance: r, reactance: x });
        }
        Ok(())
    }

    fn key(&self) -> (NodeId, NodeId) {
        (self.from.min(self.to), self.from.max(self.to))
    }
}

/// Unvalidated network as read from a file.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub nodes: BTreeSet<NodeId>,
    pub edges: Vec<EdgeSpec>,
    pub root: NodeId,
    pub nominal_voltage: f64,
    /// Extra header fields, e.g. `pv=13,17,19`.
    pub metadata: BTreeMap<String, String>,
}

impl NetworkSpec {
    /// Builds a spec whose node set is the root plus every edge endpoint.
    pub fn from_edges(root: NodeId, nominal_voltage: f64, edges: Vec<EdgeSpec>) -> Self {
        let mut nodes: BTreeSet<NodeId> = edges.iter().flat_map(|e| [e.from, e.to]).collect();
        nodes.insert(root);
        Self { nodes, edges, root, nominal_voltage, metadata: BTreeMap::new() }
    }

    /// Parses a comma-separated node list stored under `key` in the header.
    pub fn metadata_nodes(&self, key: &str) -> Result<BTreeSet<NodeId>, NetworkError> {
        let Some(raw) = self.metadata.get(key) else {
            return Ok(BTreeSet::new());
        };
        raw.split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| {
                s.trim().parse().map_err(|_| NetworkError::Malformed {
                    line: 1,
                    message: format!("bad node id `{s}` in header field {key}"),
                })
            })
            .collect()
    }

    /// Writes the file format accepted by [`parse_network`].
    pub fn serialize(&self) -> String {
        let mut out = format!("# root={} voltage={}", self.root, self.nominal_voltage);
        for (k, v) in &self.metadata {
            let _ = write!(out, " {k}={v}");
        }
        out.push('\n');
        let touched: BTreeSet<NodeId> = self.edges.iter().flat_map(|e| [e.from, e.to]).collect();
        for n in self.nodes.iter().filter(|n| !touched.contains(n) && **n != self.root) {
            let _ = writeln!(out, "{n}");
        }
        for e in &self.edges {
            let _ = writeln!(out, "{},{},{},{}", e.from, e.to, e.resistance, e.reactance);
        }
        out
    }
}

fn parse_header(line: &str) -> Option<(Option<String>, Option<String>, BTreeMap<String, String>)> {
    let body = line.strip_prefix('#')?;
    let mut root = None;
    let mut voltage = None;
    let mut meta = BTreeMap::new();
    let mut any = false;
    for token in body.split_whitespace() {
        let (k, v) = token.split_once('=')?;
        any = true;
        match k {
            "root" => root = Some(v.to_string()),
            "voltage" => voltage = Some(v.to_string()),
            _ => {
                meta.insert(k.to_string(), v.to_string());
            }
        }
    }
    any.then_some((root, voltage, meta))
}

/// Reads a network file. Topology is not checked here; see [`validate_tree`].
pub fn parse_network(text: &str) -> Result<NetworkSpec, NetworkError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let (header_line, header) = loop {
        match lines.next() {
            Some((_, "")) => continue,
            Some((n, l)) => break (n, l),
            None => return Err(NetworkError::MissingHeader),
        }
    };
    let (root, voltage, metadata) = parse_header(header).ok_or(NetworkError::MissingHeader)?;
    let root = match root {
        Some(r) => r.parse().map_err(|_| NetworkError::Malformed {
            line: header_line,
            message: format!("bad root id `{r}`"),
        })?,
        None => 1,
    };
    let nominal_voltage = match voltage {
        Some(v) => v.parse().map_err(|_| NetworkError::Malformed {
            line: header_line,
            message: format!("bad voltage `{v}`"),
        })?,
        None => 1.0,
    };
    if !(nominal_voltage > 0.0 && f64::is_finite(nominal_voltage)) {
        return Err(NetworkError::BadVoltage(nominal_voltage));
    }

    let mut nodes = BTreeSet::from([root]);
    let mut edges = Vec::new();
    let mut seen = HashMap::new();
    for (line, text) in lines {
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = text.split(',').map(str::trim).collect();
        let malformed = |message: String| NetworkError::Malformed { line, message };
        let id = |s: &str| s.parse::<NodeId>().map_err(|_| malformed(format!("bad node id `{s}`")));
        let num = |s: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| malformed(format!("bad number `{s}`")))
        };
        match fields.as_slice() {
            [n] => {
                nodes.insert(id(n)?);
            }
            [a, b, r, x] => {
                let e = EdgeSpec::new(id(a)?, id(b)?, num(r)?, num(x)?);
                if e.from == e.to {
                    return Err(malformed(format!("self-loop on node {}", e.from)));
                }
                if e.resistance < 0.0 || e.reactance < 0.0 {
                    return Err(NetworkError::NegativeImpedance { line, from: e.from, to: e.to });
                }
                if e.resistance == 0.0 && e.reactance == 0.0 {
                    return Err(NetworkError::ZeroImpedance { line, from: e.from, to: e.to });
                }
                if seen.insert(e.key(), line).is_some() {
                    return Err(NetworkError::DuplicateEdge { line, from: e.from, to: e.to });
                }
                nodes.insert(e.from);
                nodes.insert(e.to);
                edges.push(e);
            }
            _ => return Err(malformed(format!("expected `from,to,resistance,reactance`, got {} fields", fields.len()))),
        }
    }
    Ok(NetworkSpec { nodes, edges, root, nominal_voltage, metadata })
}

/// A validated tree. Nodes are addressed by a dense index in breadth-first
/// order from the root, so index 0 is the root and every parent precedes its
/// children. Edges are addressed by the index of their downstream node.
#[derive(Debug, Clone, PartialEq)]
pub struct RootedTree {
    spec: NetworkSpec,
    ids: Vec<NodeId>,
    index: HashMap<NodeId, usize>,
    parent: Vec<Option<usize>>,
    depth: Vec<usize>,
    children: Vec<Vec<usize>>,
    resistance: Vec<f64>,
    reactance: Vec<f64>,
}

impl RootedTree {
    /// The spec with every edge oriented away from the root, in index order.
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn root(&self) -> usize {
        0
    }

    pub fn nominal_voltage(&self) -> f64 {
        self.spec.nominal_voltage
    }

    pub fn id(&self, k: usize) -> NodeId {
        self.ids[k]
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    pub fn index_of(&self, id: NodeId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn parent(&self, k: usize) -> Option<usize> {
        self.parent[k]
    }

    pub fn depth(&self, k: usize) -> usize {
        self.depth[k]
    }

    pub fn children(&self, k: usize) -> &[usize] {
        &self.children[k]
    }

    /// Resistance of the edge entering node `k`; zero for the root.
    pub fn resistance(&self, k: usize) -> f64 {
        self.resistance[k]
    }

    pub fn reactance(&self, k: usize) -> f64 {
        self.reactance[k]
    }

    /// Non-root node indices (the edges of the tree).
    pub fn edges(&self) -> impl Iterator<Item = usize> {
        1..self.ids.len()
    }

    pub fn depth_map(&self) -> BTreeMap<NodeId, usize> {
        self.ids.iter().zip(&self.depth).map(|(i, d)| (*i, *d)).collect()
    }

    pub fn parent_map(&self) -> BTreeMap<NodeId, NodeId> {
        (1..self.len()).map(|k| (self.ids[k], self.ids[self.parent[k].unwrap()])).collect()
    }

    /// Node ids in topological order from the root.
    pub fn order(&self) -> &[NodeId] {
        &self.ids
    }
}

/// Orients the edges away from the root and checks that they form a
/// spanning tree. Edge records may be given in either direction.
pub fn validate_tree(spec: &NetworkSpec) -> Result<RootedTree, NetworkError> {
    if !(spec.nominal_voltage > 0.0 && spec.nominal_voltage.is_finite()) {
        return Err(NetworkError::BadVoltage(spec.nominal_voltage));
    }
    if !spec.nodes.contains(&spec.root) {
        return Err(NetworkError::MissingRoot(spec.root));
    }
    let mut adjacency: BTreeMap<NodeId, Vec<(NodeId, usize)>> = spec.nodes.iter().map(|n| (*n, Vec::new())).collect();
    for (k, e) in spec.edges.iter().enumerate() {
        e.check()?;
        for (a, b) in [(e.from, e.to), (e.to, e.from)] {
            adjacency.get_mut(&a).ok_or(NetworkError::UnknownNode(a))?.push((b, k));
        }
    }
    for list in adjacency.values_mut() {
        list.sort_unstable();
    }

    let mut ids = vec![spec.root];
    let mut index = HashMap::from([(spec.root, 0)]);
    let mut parent = vec![None];
    let mut depth = vec![0];
    let mut via_edge = vec![usize::MAX];
    let mut queue = VecDeque::from([0usize]);
    while let Some(k) = queue.pop_front() {
        for &(next, edge) in &adjacency[&ids[k]] {
            if edge == via_edge[k] {
                continue;
            }
            if index.contains_key(&next) {
                return Err(NetworkError::Cycle(next));
            }
            let j = ids.len();
            ids.push(next);
            index.insert(next, j);
            parent.push(Some(k));
            depth.push(depth[k] + 1);
            via_edge.push(edge);
            queue.push_back(j);
        }
    }
    if let Some(n) = spec.nodes.iter().find(|n| !index.contains_key(n)) {
        return Err(NetworkError::Disconnected(*n));
    }

    let n = ids.len();
    let mut children = vec![Vec::new(); n];
    let mut resistance = vec![0.0; n];
    let mut reactance = vec![0.0; n];
    let mut edges = Vec::with_capacity(n - 1);
    for k in 1..n {
        let p = parent[k].unwrap();
        children[p].push(k);
        let e = spec.edges[via_edge[k]];
        resistance[k] = e.resistance;
        reactance[k] = e.reactance;
        edges.push(EdgeSpec::new(ids[p], ids[k], e.resistance, e.reactance));
    }
    let spec = NetworkSpec { edges, ..spec.clone() };
    Ok(RootedTree { spec, ids, index, parent, depth, children, resistance, reactance })
}

/// Removes `remove` and their incident edges. Every retained node must stay
/// connected to the root.
pub fn prune_nodes(spec: &NetworkSpec, remove: &BTreeSet<NodeId>) -> Result<NetworkSpec, NetworkError> {
    if remove.contains(&spec.root) {
        return Err(NetworkError::RemoveRoot(spec.root));
    }
    if let Some(n) = remove.iter().find(|n| !spec.nodes.contains(n)) {
        return Err(NetworkError::NoSuchNode(*n));
    }
    let nodes: BTreeSet<NodeId> = spec.nodes.difference(remove).copied().collect();
    let edges: Vec<EdgeSpec> = spec
        .edges
        .iter()
        .filter(|e| !remove.contains(&e.from) && !remove.contains(&e.to))
        .copied()
        .collect();

    // Only nodes the removal cut off are an error; a node that was already
    // isolated is left for validate_tree to report.
    let before = reachable(&spec.edges, spec.root);
    let reached = reachable(&edges, spec.root);
    if let Some(n) = nodes.iter().find(|n| before.contains(n) && !reached.contains(n)) {
        return Err(NetworkError::PruneDisconnects(*n));
    }
    Ok(NetworkSpec { nodes, edges, ..spec.clone() })
}

fn reachable(edges: &[EdgeSpec], root: NodeId) -> BTreeSet<NodeId> {
    let mut adjacency: HashMap<NodeId, Vec<NodeId>> = HashMap::new();
    for e in edges {
        adjacency.entry(e.from).or_default().push(e.to);
        adjacency.entry(e.to).or_default().push(e.from);
    }
    let mut reached = BTreeSet::from([root]);
    let mut stack = vec![root];
    while let Some(n) = stack.pop() {
        for &m in adjacency.get(&n).into_iter().flatten() {
            if reached.insert(m) {
                stack.push(m);
            }
        }
    }
    reached
}

/// Node and edge sets of every subtree. Both are stored as dense tree indices
/// in breadth-first order; the edge set of the subtree at `j` is the set of
/// its nodes other than `j` (each edge named by its downstream node).
#[derive(Debug, Clone, PartialEq)]
pub struct SubtreeIndex {
    nodes: Vec<Vec<usize>>,
}

impl SubtreeIndex {
    pub fn nodes(&self, j: usize) -> &[usize] {
        &self.nodes[j]
    }

    pub fn edges(&self, j: usize) -> &[usize] {
        &self.nodes[j][1..]
    }

    pub fn size(&self, j: usize) -> usize {
        self.nodes[j].len()
    }

    pub fn contains(&self, j: usize, k: usize) -> bool {
        self.nodes[j].binary_search(&k).is_ok()
    }
}

/// Builds the index in a single pass over nodes in reverse breadth-first
/// order, which visits every child before its parent.
pub fn subtree_index(tree: &RootedTree) -> SubtreeIndex {
    let n = tree.len();
    let mut nodes: Vec<Vec<usize>> = vec![Vec::new(); n];
    for j in (0..n).rev() {
        let mut set = vec![j];
        for &c in tree.children(j) {
            set.extend_from_slice(&nodes[c]);
        }
        set.sort_unstable();
        nodes[j] = set;
    }
    SubtreeIndex { nodes }
}
