//! Computational DAG of temporal embedding states.
//!
//! Every event `(u, v, t)` appends one `State` node per inactive endpoint.
//! Each new state reads its own previous state (self-chain edge) and the
//! partner's pre-event state, or the partner's static root when the partner
//! is active. Roots come first in index order and states follow in event
//! order, so a freshly built DAG is already topologically sorted by index.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::io::{BufRead, Write};
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{ActiveSets, EventStream, Partition};

#[derive(Debug, Error)]
pub enum DagError {
    #[error("event {event} references {partition} {node} outside 0..{bound}")]
    UnknownNode {
        event: usize,
        partition: Partition,
        node: u32,
        bound: usize,
    },
    #[error("event range {start}..{end} outside stream of {len} events")]
    Range { start: usize, end: usize, len: usize },
    #[error("edge list line {line}: {message}")]
    EdgeList { line: usize, message: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A vertex of the computational DAG.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum CgNode {
    /// Static embedding of an active node.
    ActiveStatic { node: u32, partition: Partition },
    /// Initial state `(u, 0)` of an inactive node.
    Init { node: u32, partition: Partition },
    /// State of `node` right after the event with stream index `event`.
    State { node: u32, partition: Partition, event: usize },
    /// Root introduced by decoupling State node `of`.
    Replica { of: usize },
}

impl CgNode {
    pub fn is_state(&self) -> bool {
        matches!(self, CgNode::State { .. })
    }

    /// Kinds that must have no incoming edges.
    pub fn is_root_kind(&self) -> bool {
        !self.is_state()
    }
}

/// Flat CSR adjacency: neighbours of `v` are `targets[offsets[v]..offsets[v+1]]`.
#[derive(Clone, Debug)]
pub struct Adjacency {
    pub offsets: Vec<usize>,
    pub targets: Vec<usize>,
}

impl Adjacency {
    fn build(n: usize, pairs: impl Iterator<Item = (usize, usize)> + Clone) -> Self {
        let mut offsets = vec![0usize; n + 1];
        for (from, _) in pairs.clone() {
            offsets[from + 1] += 1;
        }
        for v in 0..n {
            offsets[v + 1] += offsets[v];
        }
        let mut fill = offsets.clone();
        let mut targets = vec![0usize; offsets[n]];
        for (from, to) in pairs {
            targets[fill[from]] = to;
            fill[from] += 1;
        }
        Adjacency { offsets, targets }
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.targets[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }
}

/// Computational DAG `(V_CG, E_CG)` over an event range of a stream.
#[derive(Clone, Debug, PartialEq)]
pub struct CompDag {
    nodes: Vec<CgNode>,
    edges: Vec<(usize, usize)>,
    event_range: Range<usize>,
}

impl CompDag {
    /// Assembles a DAG from raw parts without validation.
    pub fn from_parts(nodes: Vec<CgNode>, edges: Vec<(usize, usize)>) -> Self {
        let event_range = event_span(&nodes);
        CompDag {
            nodes,
            edges,
            event_range,
        }
    }

    pub fn nodes(&self) -> &[CgNode] {
        &self.nodes
    }

    pub fn node(&self, index: usize) -> CgNode {
        self.nodes[index]
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn event_range(&self) -> Range<usize> {
        self.event_range.clone()
    }

    pub fn state_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_state()).count()
    }

    pub fn state_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes.iter().enumerate().filter(|(_, n)| n.is_state()).map(|(i, _)| i)
    }

    pub fn successors(&self) -> Adjacency {
        Adjacency::build(self.nodes.len(), self.edges.iter().copied())
    }

    pub fn predecessors(&self) -> Adjacency {
        Adjacency::build(self.nodes.len(), self.edges.iter().map(|&(s, d)| (d, s)))
    }

    pub fn add_edge(&mut self, src: usize, dst: usize) {
        self.edges.push((src, dst));
    }

    pub(crate) fn set_event_range(&mut self, range: Range<usize>) {
        self.event_range = range;
    }

    pub(crate) fn push_node(&mut self, node: CgNode) -> usize {
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    /// Re-points every edge leaving `from` so that it leaves `to` instead.
    /// Returns how many edges moved.
    pub(crate) fn redirect_out_edges(&mut self, from: usize, to: usize) -> usize {
        let mut moved = 0;
        for edge in self.edges.iter_mut().filter(|e| e.0 == from) {
            edge.0 = to;
            moved += 1;
        }
        moved
    }

    /// Index of the replica created for `index`, if it has been decoupled.
    pub fn replica_of(&self, index: usize) -> Option<usize> {
        self.nodes
            .iter()
            .position(|n| matches!(n, CgNode::Replica { of } if *of == index))
    }

    /// Kahn order, visiting ready nodes smallest-index first. On a cycle,
    /// returns the nodes that could not be ordered.
    pub fn topological_order(&self) -> Result<Vec<usize>, Vec<usize>> {
        let n = self.nodes.len();
        let succ = self.successors();
        let mut indegree = vec![0usize; n];
        for &(_, d) in &self.edges {
            indegree[d] += 1;
        }
        let mut ready: VecDeque<usize> = (0..n).filter(|&v| indegree[v] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(v) = ready.pop_front() {
            order.push(v);
            for &w in succ.neighbors(v) {
                indegree[w] -= 1;
                if indegree[w] == 0 {
                    ready.push_back(w);
                }
            }
        }
        if order.len() == n {
            Ok(order)
        } else {
            Err((0..n).filter(|&v| indegree[v] > 0).collect())
        }
    }
}

fn event_span(nodes: &[CgNode]) -> Range<usize> {
    let events = nodes.iter().filter_map(|n| match n {
        CgNode::State { event, .. } => Some(*event),
        _ => None,
    });
    let (lo, hi) = events.fold((usize::MAX, 0), |(lo, hi), e| (lo.min(e), hi.max(e + 1)));
    if lo == usize::MAX {
        0..0
    } else {
        lo..hi
    }
}

/// Builds the DAG over the whole stream.
pub fn build_dag(stream: &EventStream, actives: &ActiveSets) -> Result<CompDag, DagError> {
    build_dag_range(stream, actives, 0..stream.len())
}

/// Builds the DAG over `range` only, e.g. one batch. Nodes whose history
/// starts before the range enter it through an `Init` root.
pub fn build_dag_range(stream: &EventStream, actives: &ActiveSets, range: Range<usize>) -> Result<CompDag, DagError> {
    if range.start > range.end || range.end > stream.len() {
        return Err(DagError::Range {
            start: range.start,
            end: range.end,
            len: stream.len(),
        });
    }
    let sides = [Partition::User, Partition::Item];
    for (offset, e) in stream.events[range.clone()].iter().enumerate() {
        for p in sides {
            let node = e.endpoint(p);
            if node as usize >= stream.n_nodes(p) {
                return Err(DagError::UnknownNode {
                    event: range.start + offset,
                    partition: p,
                    node,
                    bound: stream.n_nodes(p),
                });
            }
        }
    }

    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    // (partition, node) -> most recent CgNode index
    let mut last: HashMap<(Partition, u32), usize> = HashMap::new();

    for p in sides {
        for node in actives.members(p) {
            last.insert((p, node), nodes.len());
            nodes.push(CgNode::ActiveStatic { node, partition: p });
        }
    }
    for p in sides {
        let appearing: BTreeSet<u32> = stream.events[range.clone()]
            .iter()
            .map(|e| e.endpoint(p))
            .filter(|&u| !actives.is_active(p, u))
            .collect();
        for node in appearing {
            last.insert((p, node), nodes.len());
            nodes.push(CgNode::Init { node, partition: p });
        }
    }

    for event in range.clone() {
        let e = &stream.events[event];
        // both new states read the partner's pre-event state
        let before = [last[&(Partition::User, e.user)], last[&(Partition::Item, e.item)]];
        for p in sides {
            let node = e.endpoint(p);
            if actives.is_active(p, node) {
                continue;
            }
            let idx = nodes.len();
            nodes.push(CgNode::State {
                node,
                partition: p,
                event,
            });
            edges.push((before[p.index()], idx));
            edges.push((before[p.other().index()], idx));
            last.insert((p, node), idx);
        }
    }

    Ok(CompDag {
        nodes,
        edges,
        event_range: range,
    })
}

/// One broken structural rule.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    EdgeOutOfRange { src: usize, dst: usize },
    /// Nodes of one directed cycle, in edge order.
    Cycle { witness: Vec<usize> },
    RootWithInEdges { node: usize, in_degree: usize },
    InDegree { node: usize, in_degree: usize },
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks acyclicity, in-degree bounds and root conditions.
pub fn validate_dag(dag: &CompDag) -> ValidationReport {
    let n = dag.n_nodes();
    let mut violations = Vec::new();
    let bad_edges: Vec<_> = dag.edges.iter().filter(|&&(s, d)| s >= n || d >= n).copied().collect();
    if !bad_edges.is_empty() {
        violations.extend(bad_edges.into_iter().map(|(src, dst)| Violation::EdgeOutOfRange { src, dst }));
        return ValidationReport { violations };
    }

    let mut indegree = vec![0usize; n];
    for &(_, d) in &dag.edges {
        indegree[d] += 1;
    }
    for (v, node) in dag.nodes.iter().enumerate() {
        if node.is_root_kind() && indegree[v] > 0 {
            violations.push(Violation::RootWithInEdges {
                node: v,
                in_degree: indegree[v],
            });
        } else if node.is_state() && indegree[v] > 2 {
            violations.push(Violation::InDegree {
                node: v,
                in_degree: indegree[v],
            });
        }
    }

    if let Err(stuck) = dag.topological_order() {
        violations.push(Violation::Cycle {
            witness: cycle_witness(dag, &stuck),
        });
    }
    ValidationReport { violations }
}

/// Every node left over by Kahn's algorithm has a leftover predecessor, so
/// walking predecessors inside that set must revisit a node.
fn cycle_witness(dag: &CompDag, stuck: &[usize]) -> Vec<usize> {
    let in_stuck: BTreeSet<usize> = stuck.iter().copied().collect();
    let pred = dag.predecessors();
    let mut seen: HashMap<usize, usize> = HashMap::new();
    let mut walk = Vec::new();
    let mut v = stuck[0];
    loop {
        if let Some(&pos) = seen.get(&v) {
            let mut cycle = walk[pos..].to_vec();
            cycle.reverse();
            return cycle;
        }
        seen.insert(v, walk.len());
        walk.push(v);
        v = *pred
            .neighbors(v)
            .iter()
            .find(|p| in_stuck.contains(p))
            .expect("leftover node has a leftover predecessor");
    }
}

#[derive(Serialize, Deserialize)]
struct NodeTable {
    event_start: usize,
    event_end: usize,
    nodes: Vec<CgNode>,
}

/// Writes one `src dst` line per edge.
pub fn write_edge_list<W: Write>(dag: &CompDag, mut out: W) -> Result<(), DagError> {
    for &(s, d) in &dag.edges {
        writeln!(out, "{s} {d}")?;
    }
    Ok(())
}

pub fn read_edge_list<R: BufRead>(input: R) -> Result<Vec<(usize, usize)>, DagError> {
    let mut edges = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let mut parts = trimmed.split_whitespace();
        let parse = |tok: Option<&str>| -> Result<usize, DagError> {
            tok.and_then(|t| t.parse().ok()).ok_or_else(|| DagError::EdgeList {
                line: i + 1,
                message: format!("expected `src dst`, got `{trimmed}`"),
            })
        };
        let src = parse(parts.next())?;
        let dst = parse(parts.next())?;
        if parts.next().is_some() {
            return Err(DagError::EdgeList {
                line: i + 1,
                message: format!("trailing tokens in `{trimmed}`"),
            });
        }
        edges.push((src, dst));
    }
    Ok(edges)
}

/// JSON node table: event range plus the node list in index order.
pub fn write_node_table<W: Write>(dag: &CompDag, out: W) -> Result<(), DagError> {
    let table = NodeTable {
        event_start: dag.event_range.start,
        event_end: dag.event_range.end,
        nodes: dag.nodes.clone(),
    };
    serde_json::to_writer_pretty(out, &table)?;
    Ok(())
}

/// Rebuilds a DAG from a node table and an edge list.
pub fn import_dag<R1: std::io::Read, R2: BufRead>(node_table: R1, edge_list: R2) -> Result<CompDag, DagError> {
    let table: NodeTable = serde_json::from_reader(node_table)?;
    let edges = read_edge_list(edge_list)?;
    Ok(CompDag {
        nodes: table.nodes,
        edges,
        event_range: table.event_start..table.event_end,
    })
}
