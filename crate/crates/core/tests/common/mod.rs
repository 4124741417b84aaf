#![allow(dead_code)]

use std::collections::HashMap;

use rand::Rng;
use tdag_core::compgraph::{CgNode, CompDag};
use tdag_core::ingest::{Event, EventStream, Partition};

/// Random DAG on `n` nodes. Node `i` is a root with probability `p_root`
/// (always for `i = 0`); every State node takes up to `max_in` predecessors
/// among lower indices.
pub fn random_dag<R: Rng>(rng: &mut R, n: usize, p_root: f64, max_in: usize) -> CompDag {
    let mut nodes = Vec::with_capacity(n);
    let mut edges = Vec::new();
    for i in 0..n {
        if i == 0 || rng.gen_bool(p_root) {
            nodes.push(CgNode::Init {
                node: i as u32,
                partition: Partition::User,
            });
            continue;
        }
        nodes.push(CgNode::State {
            node: i as u32,
            partition: Partition::User,
            event: i,
        });
        let k = rng.gen_range(1..=max_in.min(i));
        let mut preds: Vec<usize> = (0..k).map(|_| rng.gen_range(0..i)).collect();
        preds.sort_unstable();
        preds.dedup();
        edges.extend(preds.into_iter().map(|p| (p, i)));
    }
    CompDag::from_parts(nodes, edges)
}

/// Longest path in State nodes by memoised recursion over predecessors,
/// independent of any topological pass.
pub fn memo_depth(dag: &CompDag) -> usize {
    let mut preds: Vec<Vec<usize>> = vec![Vec::new(); dag.n_nodes()];
    for &(s, d) in dag.edges() {
        preds[d].push(s);
    }
    fn go(v: usize, dag: &CompDag, preds: &[Vec<usize>], memo: &mut HashMap<usize, usize>) -> usize {
        if let Some(&l) = memo.get(&v) {
            return l;
        }
        let below = preds[v].iter().map(|&p| go(p, dag, preds, memo)).max().unwrap_or(0);
        let l = below + usize::from(dag.node(v).is_state());
        memo.insert(v, l);
        l
    }
    let mut memo = HashMap::new();
    (0..dag.n_nodes()).map(|v| go(v, dag, &preds, &mut memo)).max().unwrap_or(0)
}

pub fn stream_from_pairs(n_users: usize, n_items: usize, pairs: &[(u32, u32)]) -> EventStream {
    let events = pairs
        .iter()
        .enumerate()
        .map(|(t, &(u, i))| Event::new(u, i, (t + 1) as f64))
        .collect();
    EventStream::new(events, n_users, n_items).unwrap()
}

/// Descendants of `v`, excluding `v`.
pub fn reachable(dag: &CompDag, v: usize) -> Vec<bool> {
    let succ = dag.successors();
    let mut seen = vec![false; dag.n_nodes()];
    let mut stack = vec![v];
    while let Some(x) = stack.pop() {
        for &y in succ.neighbors(x) {
            if !seen[y] {
                seen[y] = true;
                stack.push(y);
            }
        }
    }
    seen
}
