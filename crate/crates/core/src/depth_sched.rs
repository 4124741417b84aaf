//! Work/depth metrics and level-synchronous schedules.
//!
//! Level convention: roots (and any non-State node) contribute 0, each State
//! node contributes 1, so `level(v) = [v is State] + max(level(pred))` and the
//! depth is the number of State nodes on the longest path.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

use crate::compgraph::{build_dag_range, CompDag, DagError};
use crate::ingest::{ActiveSets, BatchPlan, EventStream};

#[derive(Debug, Error)]
pub enum DepthError {
    #[error("graph has a cycle through {} nodes", .0.len())]
    Cycle(Vec<usize>),
    #[error(transparent)]
    Dag(#[from] DagError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepthReport {
    /// Number of State nodes, i.e. embedding computations.
    pub work: usize,
    pub depth: usize,
    /// Level of every node, indexed like the DAG.
    pub per_node_level: Vec<usize>,
    /// One longest path, listed from its first State node to its last.
    pub critical_path: Vec<usize>,
}

fn weight(dag: &CompDag, v: usize) -> usize {
    usize::from(dag.node(v).is_state())
}

/// Longest path by a single pass in topological order, `O(|V| + |E|)`.
///
/// The witness ends at the smallest-index node of maximal level and walks back
/// through the smallest-index predecessor that realises each level.
pub fn longest_path(dag: &CompDag) -> Result<DepthReport, DepthError> {
    let order = dag.topological_order().map_err(DepthError::Cycle)?;
    let pred = dag.predecessors();
    let mut level = vec![0usize; dag.n_nodes()];
    for &v in &order {
        let best = pred.neighbors(v).iter().map(|&p| level[p]).max().unwrap_or(0);
        level[v] = best + weight(dag, v);
    }
    let depth = level.iter().copied().max().unwrap_or(0);

    let mut critical_path = Vec::new();
    if depth > 0 {
        let mut v = level.iter().position(|&l| l == depth).expect("max exists");
        loop {
            critical_path.push(v);
            let need = level[v] - weight(dag, v);
            if need == 0 {
                break;
            }
            v = pred
                .neighbors(v)
                .iter()
                .copied()
                .filter(|&p| level[p] == need)
                .min()
                .expect("a predecessor realises the level");
        }
        critical_path.reverse();
    }

    Ok(DepthReport {
        work: dag.state_count(),
        depth,
        per_node_level: level,
        critical_path,
    })
}

/// Level-synchronous schedule: step `k` runs the State nodes of level `k+1`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub levels: Vec<Vec<usize>>,
    pub step_count: usize,
}

impl Schedule {
    /// One line per step, space-separated node indices.
    pub fn write_levels<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for level in &self.levels {
            let line: Vec<String> = level.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
        Ok(())
    }
}

pub fn wavefront_schedule(dag: &CompDag) -> Result<Schedule, DepthError> {
    let report = longest_path(dag)?;
    Ok(schedule_from_report(dag, &report))
}

pub fn schedule_from_report(dag: &CompDag, report: &DepthReport) -> Schedule {
    let mut levels = vec![Vec::new(); report.depth];
    for v in dag.state_indices() {
        levels[report.per_node_level[v] - 1].push(v);
    }
    Schedule {
        step_count: levels.len(),
        levels,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchDepthStats {
    pub reports: Vec<DepthReport>,
    pub mean_depth: f64,
}

impl BatchDepthStats {
    pub fn depths(&self) -> Vec<usize> {
        self.reports.iter().map(|r| r.depth).collect()
    }

    pub fn total_work(&self) -> usize {
        self.reports.iter().map(|r| r.work).sum()
    }
}

pub fn mean(values: impl IntoIterator<Item = usize>) -> f64 {
    let (sum, n) = values.into_iter().fold((0usize, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum as f64 / n as f64
    }
}

/// One DAG and one report per batch; batches are processed in parallel and
/// returned in plan order.
pub fn batch_depth_stats(stream: &EventStream, actives: &ActiveSets, plan: &BatchPlan) -> Result<BatchDepthStats, DepthError> {
    let reports = plan
        .boundaries
        .par_iter()
        .map(|range| {
            let dag = build_dag_range(stream, actives, range.clone())?;
            longest_path(&dag)
        })
        .collect::<Result<Vec<_>, DepthError>>()?;
    let mean_depth = mean(reports.iter().map(|r| r.depth));
    Ok(BatchDepthStats { reports, mean_depth })
}
