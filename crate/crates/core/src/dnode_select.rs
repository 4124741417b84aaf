//! D-node selection and the decoupling transform.
//!
//! Decoupling State node `i` adds a root replica `i'` and moves every edge
//! `(i, j)` to `(i', j)`: descendants of `i` then read a free vector instead
//! of waiting for `i` to be computed. Three selectors are provided: the greedy
//! longest-path-center heuristic, an exhaustive search over small DAGs, and
//! the cut-by-time baseline that severs all edges crossing time boundaries.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compgraph::{build_dag_range, CgNode, CompDag, DagError};
use crate::depth_sched::{longest_path, mean, DepthError};
use crate::ingest::{ActiveSets, BatchPlan, EventStream, Partition};

/// Exhaustive search bounds for [`select_exact`].
pub const EXACT_MAX_STATES: usize = 24;
pub const EXACT_MAX_K: usize = 4;

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("node {0} is out of range")]
    OutOfRange(usize),
    #[error("node {0} is not a State node and cannot be decoupled")]
    NotState(usize),
    #[error("node {0} is already decoupled")]
    AlreadyDecoupled(usize),
    #[error(
        "exact search handles at most {EXACT_MAX_STATES} State nodes and K <= {EXACT_MAX_K} \
         (got {states} and K = {k}); use select_greedy"
    )]
    TooLarge { states: usize, k: usize },
    #[error("n_parts must be at least 1")]
    NoParts,
    #[error(transparent)]
    Depth(#[from] DepthError),
    #[error(transparent)]
    Dag(#[from] DagError),
}

/// Identifies a temporal state `(u, t)` independently of DAG indexing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DNodeKey {
    pub node: u32,
    pub event: usize,
    pub partition: Partition,
}

impl DNodeKey {
    pub fn of(node: CgNode) -> Option<DNodeKey> {
        match node {
            CgNode::State { node, partition, event } => Some(DNodeKey { node, event, partition }),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DNodeSet {
    pub members: Vec<usize>,
    pub quota: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoupleResult {
    pub dag: CompDag,
    pub dnodes: DNodeSet,
    /// replica index -> original index
    pub replica_of: BTreeMap<usize, usize>,
    /// Depth before any selection, then after each recorded step.
    pub depth_trajectory: Vec<usize>,
}

impl DecoupleResult {
    fn unchanged(dag: &CompDag, quota: usize, depth: usize) -> Self {
        DecoupleResult {
            dag: dag.clone(),
            dnodes: DNodeSet {
                members: Vec::new(),
                quota,
            },
            replica_of: BTreeMap::new(),
            depth_trajectory: vec![depth],
        }
    }

    pub fn final_depth(&self) -> usize {
        *self.depth_trajectory.last().expect("trajectory starts with the initial depth")
    }

    /// D-nodes as `(node, event, partition)` keys, in selection order.
    pub fn keys(&self) -> Vec<DNodeKey> {
        self.dnodes
            .members
            .iter()
            .filter_map(|&i| DNodeKey::of(self.dag.node(i)))
            .collect()
    }

    pub fn export(&self) -> DecoupleExport {
        DecoupleExport {
            dnodes: self.keys(),
            depth_trajectory: self.depth_trajectory.clone(),
        }
    }
}

/// JSON form of a selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoupleExport {
    pub dnodes: Vec<DNodeKey>,
    pub depth_trajectory: Vec<usize>,
}

fn decouple_in_place(dag: &mut CompDag, node: usize) -> Result<usize, SelectError> {
    if node >= dag.n_nodes() {
        return Err(SelectError::OutOfRange(node));
    }
    if !dag.node(node).is_state() {
        return Err(SelectError::NotState(node));
    }
    if dag.replica_of(node).is_some() {
        return Err(SelectError::AlreadyDecoupled(node));
    }
    let replica = dag.push_node(CgNode::Replica { of: node });
    dag.redirect_out_edges(node, replica);
    Ok(replica)
}

/// Splits `node` into itself (keeping in-edges) and a root replica that takes
/// over all of its out-edges. Node count grows by one; edge count is kept.
pub fn decouple(dag: &CompDag, node: usize) -> Result<CompDag, SelectError> {
    let mut out = dag.clone();
    decouple_in_place(&mut out, node)?;
    Ok(out)
}

/// Position of the node to cut on a path of `m` State nodes. Cutting after
/// position `c` leaves segments of `c + 1` and `m - c - 1` nodes, balanced
/// when `c = ⌊(m-1)/2⌋`.
pub fn center_position(m: usize) -> usize {
    m.saturating_sub(1) / 2
}

/// Greedy selection: K times, cut the center of the current longest path.
/// Stops early once the depth is at most 1.
pub fn select_greedy(dag: &CompDag, k: usize) -> Result<DecoupleResult, SelectError> {
    let mut report = longest_path(dag)?;
    let mut result = DecoupleResult::unchanged(dag, k, report.depth);
    for _ in 0..k {
        if report.depth <= 1 {
            break;
        }
        let path = &report.critical_path;
        let center = path[center_position(path.len())];
        let replica = decouple_in_place(&mut result.dag, center)?;
        result.dnodes.members.push(center);
        result.replica_of.insert(replica, center);
        report = longest_path(&result.dag)?;
        result.depth_trajectory.push(report.depth);
    }
    Ok(result)
}

/// Depth of `dag` when the nodes flagged in `dnode` are decoupled, evaluated
/// directly from the constraints `ℓ_i ≥ (1 − d_j)·ℓ_j + 1` over an existing
/// topological order (no graph rewriting).
pub fn depth_with_dnodes(dag: &CompDag, order: &[usize], dnode: &[bool]) -> usize {
    let pred = dag.predecessors();
    let mut level = vec![0usize; dag.n_nodes()];
    let mut depth = 0;
    for &v in order {
        let best = pred
            .neighbors(v)
            .iter()
            .map(|&p| if dnode[p] { 0 } else { level[p] })
            .max()
            .unwrap_or(0);
        level[v] = best + usize::from(dag.node(v).is_state());
        depth = depth.max(level[v]);
    }
    depth
}

/// Exhaustive minimiser over all d-node sets of size at most `k`. Ties go to
/// the smaller set, then the lexicographically first one.
pub fn select_exact(dag: &CompDag, k: usize) -> Result<DecoupleResult, SelectError> {
    let states: Vec<usize> = dag.state_indices().filter(|&v| dag.replica_of(v).is_none()).collect();
    if states.len() > EXACT_MAX_STATES || k > EXACT_MAX_K {
        return Err(SelectError::TooLarge { states: states.len(), k });
    }
    let order = dag.topological_order().map_err(DepthError::Cycle)?;
    let mut flags = vec![false; dag.n_nodes()];
    let mut best_depth = depth_with_dnodes(dag, &order, &flags);
    let mut best: Vec<usize> = Vec::new();
    let floor = usize::from(!states.is_empty());

    'sizes: for size in 1..=k.min(states.len()) {
        let mut combo: Vec<usize> = (0..size).collect();
        loop {
            if best_depth <= floor {
                break 'sizes;
            }
            for &c in &combo {
                flags[states[c]] = true;
            }
            let d = depth_with_dnodes(dag, &order, &flags);
            for &c in &combo {
                flags[states[c]] = false;
            }
            if d < best_depth {
                best_depth = d;
                best = combo.iter().map(|&c| states[c]).collect();
            }
            if !next_combination(&mut combo, states.len()) {
                break;
            }
        }
    }

    let mut result = DecoupleResult::unchanged(dag, k, longest_path(dag)?.depth);
    for &v in &best {
        let replica = decouple_in_place(&mut result.dag, v)?;
        result.dnodes.members.push(v);
        result.replica_of.insert(replica, v);
        result.depth_trajectory.push(longest_path(&result.dag)?.depth);
    }
    debug_assert_eq!(result.final_depth(), best_depth);
    Ok(result)
}

fn next_combination(combo: &mut [usize], n: usize) -> bool {
    let k = combo.len();
    for i in (0..k).rev() {
        if combo[i] < n - k + i {
            combo[i] += 1;
            for j in i + 1..k {
                combo[j] = combo[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Part of event offset `x` when `len` events are cut into `parts` windows
/// at `⌊i·len/parts⌋`.
fn part_of(x: usize, len: usize, parts: usize) -> usize {
    ((x as u128 + 1) * parts as u128).div_ceil(len as u128) as usize - 1
}

/// Cut-by-time baseline: split the DAG's event range into `n_parts` equal
/// event-count windows and decouple every State node with an out-edge into a
/// later window. The number of d-nodes is an outcome, not an input. The
/// trajectory records only the depth before and after.
pub fn select_cut_by_time(dag: &CompDag, n_parts: usize) -> Result<DecoupleResult, SelectError> {
    if n_parts == 0 {
        return Err(SelectError::NoParts);
    }
    let range = dag.event_range();
    let len = range.len();
    let initial = longest_path(dag)?.depth;
    let event_of = |v: usize| match dag.node(v) {
        CgNode::State { event, .. } => Some(event),
        _ => None,
    };
    let mut cut = BTreeSet::new();
    for &(s, d) in dag.edges() {
        if let (Some(es), Some(ed)) = (event_of(s), event_of(d)) {
            if part_of(es - range.start, len, n_parts) < part_of(ed - range.start, len, n_parts) {
                cut.insert(s);
            }
        }
    }
    let mut result = DecoupleResult::unchanged(dag, cut.len(), initial);
    for v in cut {
        let replica = decouple_in_place(&mut result.dag, v)?;
        result.dnodes.members.push(v);
        result.replica_of.insert(replica, v);
    }
    result.depth_trajectory.push(longest_path(&result.dag)?.depth);
    Ok(result)
}

/// Selection strategy applied independently to each batch DAG.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    None,
    Greedy,
    Exact,
    CutByTime,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::Greedy => "greedy",
            Strategy::Exact => "exact",
            Strategy::CutByTime => "cut-by-time",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Strategy::None),
            "greedy" => Ok(Strategy::Greedy),
            "exact" => Ok(Strategy::Exact),
            "cut-by-time" | "cut_by_time" => Ok(Strategy::CutByTime),
            other => Err(format!("unknown strategy `{other}` (none, greedy, exact, cut-by-time)")),
        }
    }
}

/// Runs `strategy` with parameter `k_or_parts` on one batch DAG.
pub fn select(dag: &CompDag, strategy: Strategy, k_or_parts: usize) -> Result<DecoupleResult, SelectError> {
    match strategy {
        Strategy::None => Ok(DecoupleResult::unchanged(dag, 0, longest_path(dag)?.depth)),
        Strategy::Greedy => select_greedy(dag, k_or_parts),
        Strategy::Exact => select_exact(dag, k_or_parts),
        Strategy::CutByTime => select_cut_by_time(dag, k_or_parts),
    }
}

/// Per-batch outcome of one sweep point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchOutcome {
    pub n_dnodes: usize,
    pub depth: usize,
}

/// One row of the longest-path comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub strategy: Strategy,
    pub k_or_parts: usize,
    /// Mean d-nodes per batch.
    pub n_dnodes: f64,
    /// Mean over batches of each batch's longest path (State nodes).
    pub mean_longest_path: f64,
    pub per_batch: Vec<BatchOutcome>,
}

impl SweepRow {
    fn from_outcomes(strategy: Strategy, k_or_parts: usize, per_batch: Vec<BatchOutcome>) -> Self {
        SweepRow {
            strategy,
            k_or_parts,
            n_dnodes: mean(per_batch.iter().map(|b| b.n_dnodes)),
            mean_longest_path: mean(per_batch.iter().map(|b| b.depth)),
            per_batch,
        }
    }
}

fn batch_dags(stream: &EventStream, actives: &ActiveSets, plan: &BatchPlan) -> Result<Vec<CompDag>, SelectError> {
    plan.boundaries
        .par_iter()
        .map(|r| build_dag_range(stream, actives, r.clone()).map_err(SelectError::from))
        .collect()
}

/// Greedy sweep over `ks`. Greedy is prefix-consistent, so one run per batch
/// with the largest K yields every sweep point from its trajectory.
pub fn sweep_greedy(
    stream: &EventStream,
    actives: &ActiveSets,
    plan: &BatchPlan,
    ks: &[usize],
) -> Result<Vec<SweepRow>, SelectError> {
    let dags = batch_dags(stream, actives, plan)?;
    let k_max = ks.iter().copied().max().unwrap_or(0);
    let trajectories = dags
        .par_iter()
        .map(|dag| select_greedy(dag, k_max).map(|r| r.depth_trajectory))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ks
        .iter()
        .map(|&k| {
            let outcomes = trajectories
                .iter()
                .map(|t| {
                    let steps = k.min(t.len() - 1);
                    BatchOutcome {
                        n_dnodes: steps,
                        depth: t[steps],
                    }
                })
                .collect();
            SweepRow::from_outcomes(Strategy::Greedy, k, outcomes)
        })
        .collect())
}

/// Sweep for strategies without prefix structure (exact, cut-by-time, none).
pub fn sweep(
    stream: &EventStream,
    actives: &ActiveSets,
    plan: &BatchPlan,
    strategy: Strategy,
    values: &[usize],
) -> Result<Vec<SweepRow>, SelectError> {
    if strategy == Strategy::Greedy {
        return sweep_greedy(stream, actives, plan, values);
    }
    let dags = batch_dags(stream, actives, plan)?;
    values
        .iter()
        .map(|&v| {
            let outcomes = dags
                .par_iter()
                .map(|dag| {
                    select(dag, strategy, v).map(|r| BatchOutcome {
                        n_dnodes: r.dnodes.members.len(),
                        depth: r.final_depth(),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(SweepRow::from_outcomes(strategy, v, outcomes))
        })
        .collect()
}

/// Greedy depth per batch when each batch gets exactly as many d-nodes as a
/// reference row used there.
pub fn greedy_matched(
    stream: &EventStream,
    actives: &ActiveSets,
    plan: &BatchPlan,
    reference: &SweepRow,
) -> Result<SweepRow, SelectError> {
    let dags = batch_dags(stream, actives, plan)?;
    let outcomes = dags
        .par_iter()
        .zip(reference.per_batch.par_iter())
        .map(|(dag, r)| {
            select_greedy(dag, r.n_dnodes).map(|g| BatchOutcome {
                n_dnodes: g.dnodes.members.len(),
                depth: g.final_depth(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SweepRow::from_outcomes(Strategy::Greedy, reference.k_or_parts, outcomes))
}

/// CSV with header `strategy,k_or_parts,n_dnodes,mean_longest_path`.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "strategy,k_or_parts,n_dnodes,mean_longest_path")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{:.2},{:.2}",
            r.strategy.name(),
            r.k_or_parts,
            r.n_dnodes,
            r.mean_longest_path
        )?;
    }
    Ok(())
}
