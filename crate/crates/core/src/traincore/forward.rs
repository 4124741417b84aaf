//! Evaluation of a computational DAG in event order, with the ranking loss,
//! the φ penalty and reverse-mode gradients.
//!
//! Every read of a temporal state goes through a `Src`: the shared init
//! vector, a state carried in from an earlier batch, a static embedding, a φ
//! vector, or a State node computed in this pass. After a d-node is computed
//! its later readers see φ, never the computed vector.

use std::collections::HashMap;
use std::ops::Range;

use rand::seq::index;
use rand::Rng;

use super::gradcheck::Params;
use super::gru::{gru_backward, gru_forward, GruCache};
use super::linalg::{axpy, dist, dot};
use super::loss::softmax_loss_grad;
use super::mlp::MlpCache;
use super::model::{ModelState, PhiTable};
use super::TrainError;
use crate::compgraph::{build_dag, CgNode, CompDag};
use crate::dnode_select::{DNodeKey, DecoupleResult};
use crate::ingest::{ActiveSets, EventStream, Partition};

const SIDES: [Partition; 2] = [Partition::User, Partition::Item];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Src {
    Xi(Partition),
    Carry(Partition, u32),
    Psi(Partition, u32),
    Phi(usize),
    State(usize),
}

/// Latest states and last-item features carried into a batch from earlier
/// batches of the same epoch. They enter the batch as constants.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Carry {
    states: [HashMap<u32, Vec<f64>>; 2],
    last_features: HashMap<u32, Vec<u32>>,
}

impl Carry {
    pub fn new() -> Self {
        Carry::default()
    }

    pub fn state(&self, p: Partition, node: u32) -> Option<&[f64]> {
        self.states[p.index()].get(&node).map(Vec::as_slice)
    }

    /// Absorbs the computed states of a finished pass over `dag`.
    pub fn advance(&mut self, stream: &EventStream, dag: &CompDag, trace: &ForwardTrace) {
        // State indices grow with the event index
        for i in dag.state_indices() {
            if let CgNode::State { node, partition, .. } = dag.node(i) {
                self.states[partition.index()].insert(node, trace.emb[i].clone());
            }
        }
        for e in &stream.events[dag.event_range()] {
            self.last_features.insert(e.user, e.features.clone());
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// Value of every DAG node: computed embeddings for State nodes, ψ for
    /// active roots, ξ or the carried state for Init roots, φ for replicas.
    pub emb: Vec<Vec<f64>>,
    /// Scores per event, true item first; empty when no loss was requested.
    pub scores: Vec<Vec<f64>>,
    pub event_loss: Vec<f64>,
    pub penalties: Vec<PenaltyTerm>,
    /// Mean of `event_loss`.
    pub ranking_loss: f64,
    pub penalty_loss: f64,
    pub total_loss: f64,
    /// Longest chain of sequential operator applications, counted while
    /// evaluating.
    pub depth: usize,
    /// `max ‖φ − emb‖` over the d-nodes of the pass.
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PenaltyTerm {
    pub key: DNodeKey,
    /// DAG index of the computed state.
    pub state: usize,
    pub value: f64,
}

struct PredTape {
    user: Src,
    last: Option<Vec<u32>>,
    cache: MlpCache,
    h: Vec<f64>,
    cands: Vec<Src>,
    cand_vals: Vec<Vec<f64>>,
    dscores: Vec<f64>,
}

struct UpdateTape {
    state: usize,
    partition: Partition,
    self_src: Src,
    other_src: Src,
    cache: GruCache,
}

struct EventTape {
    features: Vec<u32>,
    pred: Option<PredTape>,
    updates: Vec<UpdateTape>,
    /// (State index, φ slot)
    penalties: Vec<(usize, usize)>,
}

/// Everything the backward pass needs from a forward pass.
pub struct Tape {
    events: Vec<EventTape>,
    n_loss: usize,
}

/// Head input `[user state ‖ last-item feature]`; the sentinel replaces the
/// feature on a user's first event.
fn head_input(model: &ModelState, user_state: &[f64], last: Option<&[u32]>) -> Vec<f64> {
    let mut x = user_state.to_vec();
    match last {
        Some(cats) => x.extend(model.embed_features(cats)),
        None => x.extend_from_slice(&model.sentinel),
    }
    x
}

/// Inner-product scores of the head output against each candidate item state.
pub fn predict(model: &ModelState, user_state: &[f64], last: Option<&[u32]>, candidates: &[&[f64]]) -> Vec<f64> {
    let (h, _) = model.head.forward(&head_input(model, user_state, last));
    candidates.iter().map(|c| dot(&h, c)).collect()
}

/// `k` distinct items other than `exclude`, uniformly; every other item when
/// `k` reaches the pool size.
pub fn sample_negatives<R: Rng>(n_items: usize, exclude: u32, k: usize, rng: &mut R) -> Vec<u32> {
    let pool = n_items.saturating_sub(1);
    let shift = |i: usize| if i >= exclude as usize { i as u32 + 1 } else { i as u32 };
    if k >= pool {
        return (0..pool).map(shift).collect();
    }
    index::sample(rng, pool, k).into_iter().map(shift).collect()
}

pub fn negatives_for<R: Rng>(stream: &EventStream, range: Range<usize>, k: usize, rng: &mut R) -> Vec<Vec<u32>> {
    stream.events[range]
        .iter()
        .map(|e| sample_negatives(stream.n_items, e.item, k, rng))
        .collect()
}

struct Values<'a> {
    model: &'a ModelState,
    phis: &'a PhiTable,
    carry: &'a Carry,
}

impl<'a> Values<'a> {
    fn get<'b>(&'b self, src: Src, emb: &'b [Vec<f64>]) -> &'b [f64] {
        match src {
            Src::Xi(p) => &self.model.xi[p.index()],
            Src::Carry(p, u) => self.carry.state(p, u).expect("carried state exists"),
            Src::Psi(p, u) => self.model.psi_of(p, u).expect("checked on first read"),
            Src::Phi(slot) => self.phis.value(slot),
            Src::State(i) => &emb[i],
        }
    }
}

/// One pass over the events of `dag`. With `negatives` (one list per event
/// in range) the ranking loss is evaluated too.
pub fn forward_dag(
    model: &ModelState,
    phis: &PhiTable,
    stream: &EventStream,
    actives: &ActiveSets,
    dag: &CompDag,
    negatives: Option<&[Vec<u32>]>,
    carry: &Carry,
) -> Result<(ForwardTrace, Tape), TrainError> {
    let range = dag.event_range();
    if range.end > stream.len() {
        return Err(TrainError::DagMismatch(format!("event range {range:?} exceeds the stream")));
    }
    if let Some(neg) = negatives {
        if neg.len() != range.len() {
            return Err(TrainError::Dimension {
                what: "negative lists",
                expected: range.len(),
                got: neg.len(),
            });
        }
    }
    let d = model.dim;
    let n = dag.n_nodes();
    let vals = Values { model, phis, carry };

    let mut state_at: Vec<[Option<usize>; 2]> = vec![[None, None]; range.len()];
    let mut phi_slot: Vec<Option<usize>> = vec![None; n];
    let mut emb: Vec<Vec<f64>> = vec![Vec::new(); n];
    for (i, node) in dag.nodes().iter().enumerate() {
        match *node {
            CgNode::State { partition, event, .. } => {
                if !range.contains(&event) {
                    return Err(TrainError::DagMismatch(format!("state {i} outside {range:?}")));
                }
                state_at[event - range.start][partition.index()] = Some(i);
            }
            CgNode::Replica { of } => {
                let key = DNodeKey::of(dag.node(of))
                    .ok_or_else(|| TrainError::DagMismatch(format!("replica of non-state {of}")))?;
                let slot = phis.slot(&key).ok_or(TrainError::MissingPhi(key))?;
                if phis.value(slot).len() != d {
                    return Err(TrainError::Dimension {
                        what: "phi",
                        expected: d,
                        got: phis.value(slot).len(),
                    });
                }
                phi_slot[of] = Some(slot);
                emb[i] = phis.value(slot).to_vec();
            }
            CgNode::ActiveStatic { node, partition } => {
                emb[i] = model
                    .psi_of(partition, node)
                    .ok_or(TrainError::MissingPsi { partition, node })?
                    .to_vec();
            }
            CgNode::Init { node, partition } => {
                emb[i] = carry.state(partition, node).unwrap_or(&model.xi[partition.index()]).to_vec();
            }
        }
    }

    // (source, chain length) as seen by the next reader
    let mut visible: HashMap<(Partition, u32), (Src, usize)> = HashMap::new();
    let lookup = |visible: &HashMap<(Partition, u32), (Src, usize)>, p: Partition, u: u32| -> Result<(Src, usize), TrainError> {
        if let Some(&v) = visible.get(&(p, u)) {
            return Ok(v);
        }
        if actives.is_active(p, u) {
            model.psi_of(p, u).ok_or(TrainError::MissingPsi { partition: p, node: u })?;
            Ok((Src::Psi(p, u), 0))
        } else if carry.state(p, u).is_some() {
            Ok((Src::Carry(p, u), 0))
        } else {
            Ok((Src::Xi(p), 0))
        }
    };
    let mut last_features: HashMap<u32, Vec<u32>> = HashMap::new();

    let mut tape = Tape {
        events: Vec::with_capacity(range.len()),
        n_loss: 0,
    };
    let mut scores_out = Vec::new();
    let mut event_loss = Vec::new();
    let mut penalties = Vec::new();
    let (mut depth, mut residual, mut penalty_loss) = (0usize, 0.0f64, 0.0f64);

    for j in range.clone() {
        let local = j - range.start;
        let e = &stream.events[j];
        if e.user as usize >= stream.n_users || e.item as usize >= stream.n_items {
            return Err(TrainError::DagMismatch(format!("event {j} endpoint out of range")));
        }
        let feat = model.embed_features(&e.features);
        let pre = [lookup(&visible, Partition::User, e.user)?, lookup(&visible, Partition::Item, e.item)?];

        let pred = match negatives {
            None => None,
            Some(neg) => {
                let last = last_features
                    .get(&e.user)
                    .or_else(|| carry.last_features.get(&e.user))
                    .cloned();
                let x = head_input(model, vals.get(pre[0].0, &emb), last.as_deref());
                let (h, cache) = model.head.forward(&x);
                let mut cands = vec![pre[1].0];
                for &c in &neg[local] {
                    if c as usize >= stream.n_items {
                        return Err(TrainError::DagMismatch(format!("negative item {c} out of range")));
                    }
                    cands.push(lookup(&visible, Partition::Item, c)?.0);
                }
                let cand_vals: Vec<Vec<f64>> = cands.iter().map(|&s| vals.get(s, &emb).to_vec()).collect();
                let scores: Vec<f64> = cand_vals.iter().map(|v| dot(&h, v)).collect();
                let (loss, dscores) = softmax_loss_grad(&scores)?;
                event_loss.push(loss);
                scores_out.push(scores);
                Some(PredTape {
                    user: pre[0].0,
                    last,
                    cache,
                    h,
                    cands,
                    cand_vals,
                    dscores,
                })
            }
        };

        let mut updates = Vec::new();
        for p in SIDES {
            let node = e.endpoint(p);
            let active = actives.is_active(p, node);
            match state_at[local][p.index()] {
                None if active => {}
                Some(s) if !active => {
                    let (self_src, self_chain) = pre[p.index()];
                    let (other_src, other_chain) = pre[p.other().index()];
                    let (out, cache) = gru_forward(
                        vals.get(self_src, &emb),
                        vals.get(other_src, &emb),
                        &feat,
                        &model.theta[p.index()],
                    );
                    emb[s] = out;
                    let chain = 1 + self_chain.max(other_chain);
                    depth = depth.max(chain);
                    updates.push((
                        UpdateTape {
                            state: s,
                            partition: p,
                            self_src,
                            other_src,
                            cache,
                        },
                        chain,
                    ));
                }
                _ => {
                    return Err(TrainError::DagMismatch(format!(
                        "event {j}: {p} {node} active={active} disagrees with the DAG"
                    )))
                }
            }
        }

        let mut pen_tape = Vec::new();
        for (up, chain) in &updates {
            let key = (up.partition, e.endpoint(up.partition));
            match phi_slot[up.state] {
                Some(slot) => {
                    let r = dist(phis.value(slot), &emb[up.state]);
                    let pen = 0.5 * phis.alpha * r * r;
                    penalty_loss += pen;
                    residual = residual.max(r);
                    penalties.push(PenaltyTerm {
                        key: DNodeKey::of(dag.node(up.state)).expect("state"),
                        state: up.state,
                        value: pen,
                    });
                    pen_tape.push((up.state, slot));
                    visible.insert(key, (Src::Phi(slot), 0));
                }
                None => {
                    visible.insert(key, (Src::State(up.state), *chain));
                }
            }
        }
        last_features.insert(e.user, e.features.clone());

        if pred.is_some() {
            tape.n_loss += 1;
        }
        tape.events.push(EventTape {
            features: e.features.clone(),
            pred,
            updates: updates.into_iter().map(|(u, _)| u).collect(),
            penalties: pen_tape,
        });
    }

    let ranking_loss = if event_loss.is_empty() {
        0.0
    } else {
        event_loss.iter().sum::<f64>() / event_loss.len() as f64
    };
    let trace = ForwardTrace {
        emb,
        scores: scores_out,
        event_loss,
        penalties,
        ranking_loss,
        penalty_loss,
        total_loss: ranking_loss + penalty_loss,
        depth,
        residual,
    };
    Ok((trace, tape))
}

struct Grads {
    model: ModelState,
    phi: PhiTable,
    states: Vec<Vec<f64>>,
}

impl Grads {
    fn add(&mut self, src: Src, a: f64, v: &[f64]) {
        let dst: &mut [f64] = match src {
            Src::Xi(p) => &mut self.model.xi[p.index()],
            Src::Carry(..) => return,
            Src::Psi(p, u) => self.model.psi[p.index()].get_mut(&u).expect("psi read in forward"),
            Src::Phi(slot) => self.phi.value_mut(slot),
            Src::State(i) => {
                let s = &mut self.states[i];
                if s.is_empty() {
                    s.resize(v.len(), 0.0);
                }
                s
            }
        };
        axpy(a, v, dst);
    }
}

/// Gradients of `trace.total_loss` w.r.t. the model and the φ table.
pub fn backward(model: &ModelState, phis: &PhiTable, trace: &ForwardTrace, tape: &Tape) -> (ModelState, PhiTable) {
    backward_damped(model, phis, trace, tape, 1.0)
}

/// [`backward`] with the penalty's gradient on the computed states scaled by
/// `state_penalty`. The φ side is left unscaled.
pub(crate) fn backward_damped(
    model: &ModelState,
    phis: &PhiTable,
    trace: &ForwardTrace,
    tape: &Tape,
    state_penalty: f64,
) -> (ModelState, PhiTable) {
    let d = model.dim;
    let mut g = Grads {
        model: model.zeros_like(),
        phi: phis.zeros_like(),
        states: vec![Vec::new(); trace.emb.len()],
    };
    let scale = if tape.n_loss > 0 { 1.0 / tape.n_loss as f64 } else { 0.0 };

    for ev in tape.events.iter().rev() {
        if let Some(pr) = &ev.pred {
            let mut dh = vec![0.0; d];
            for ((&src, v), &ds) in pr.cands.iter().zip(&pr.cand_vals).zip(&pr.dscores) {
                let w = ds * scale;
                axpy(w, v, &mut dh);
                g.add(src, w, &pr.h);
            }
            let dx = model.head.backward(&pr.cache, &dh, &mut g.model.head);
            g.add(pr.user, 1.0, &dx[..d]);
            match &pr.last {
                Some(cats) => model.embed_features_backward(cats, &dx[d..], &mut g.model),
                None => axpy(1.0, &dx[d..], &mut g.model.sentinel),
            }
        }
        for &(s, slot) in &ev.penalties {
            let diff: Vec<f64> = trace.emb[s].iter().zip(phis.value(slot)).map(|(e, p)| e - p).collect();
            g.add(Src::State(s), state_penalty * phis.alpha, &diff);
            g.add(Src::Phi(slot), -phis.alpha, &diff);
        }
        for up in &ev.updates {
            let dout = std::mem::take(&mut g.states[up.state]);
            if dout.is_empty() {
                continue;
            }
            let k = up.partition.index();
            let (dself, dother, dfeat) = gru_backward(&model.theta[k], &up.cache, &dout, &mut g.model.theta[k]);
            g.add(up.self_src, 1.0, &dself);
            g.add(up.other_src, 1.0, &dother);
            model.embed_features_backward(&ev.features, &dfeat, &mut g.model);
        }
    }
    (g.model, g.phi)
}

/// Whole-stream pass without d-nodes from fresh state.
pub fn forward_coupled(
    stream: &EventStream,
    actives: &ActiveSets,
    model: &ModelState,
    negatives: Option<&[Vec<u32>]>,
) -> Result<ForwardTrace, TrainError> {
    let dag = build_dag(stream, actives)?;
    let phis = PhiTable::new(0.0);
    Ok(forward_dag(model, &phis, stream, actives, &dag, negatives, &Carry::new())?.0)
}

/// Whole-stream pass over a decoupled DAG from fresh state.
pub fn forward_decoupled(
    stream: &EventStream,
    actives: &ActiveSets,
    model: &ModelState,
    dnodes: &DecoupleResult,
    phis: &PhiTable,
    negatives: Option<&[Vec<u32>]>,
) -> Result<ForwardTrace, TrainError> {
    Ok(forward_dag(model, phis, stream, actives, &dnodes.dag, negatives, &Carry::new())?.0)
}

/// Undoes decoupling: drops replicas and points their edges back at the
/// original nodes.
pub fn recouple(dag: &CompDag) -> CompDag {
    let mut remap = vec![usize::MAX; dag.n_nodes()];
    let mut nodes = Vec::new();
    for (i, node) in dag.nodes().iter().enumerate() {
        if !matches!(node, CgNode::Replica { .. }) {
            remap[i] = nodes.len();
            nodes.push(*node);
        }
    }
    let origin = |v: usize| match dag.node(v) {
        CgNode::Replica { of } => remap[of],
        _ => remap[v],
    };
    let edges = dag.edges().iter().map(|&(s, t)| (origin(s), origin(t))).collect();
    let mut out = CompDag::from_parts(nodes, edges);
    out.set_event_range(dag.event_range());
    out
}

/// φ for every replica in `dags`, set to the state a coupled pass computes.
/// Batches are consecutive and share carried state, as in training.
pub fn phis_from_coupled(
    model: &ModelState,
    stream: &EventStream,
    actives: &ActiveSets,
    dags: &[CompDag],
    alpha: f64,
) -> Result<PhiTable, TrainError> {
    let mut phis = PhiTable::new(alpha);
    let empty = PhiTable::new(alpha);
    let mut carry = Carry::new();
    for dag in dags {
        let coupled = recouple(dag);
        let (trace, _) = forward_dag(model, &empty, stream, actives, &coupled, None, &carry)?;
        let by_key: HashMap<DNodeKey, usize> = coupled
            .state_indices()
            .filter_map(|i| DNodeKey::of(coupled.node(i)).map(|k| (k, i)))
            .collect();
        for node in dag.nodes() {
            if let CgNode::Replica { of } = node {
                let key = DNodeKey::of(dag.node(*of)).expect("replicas copy State nodes");
                phis.insert(key, trace.emb[by_key[&key]].clone());
            }
        }
        carry.advance(stream, &coupled, &trace);
    }
    Ok(phis)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compgraph::build_dag_range;
    use crate::depth_sched::longest_path;
    use crate::dnode_select::select_greedy;
    use crate::ingest::{classify_active, Threshold};
    use crate::synthgen::{figure2_fixture, generate_scale_free, StreamSpec};
    use crate::traincore::gradcheck::{compare, numeric_grad, worst, FD_EPS};
    use crate::traincore::linalg::max_abs_diff;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn instance(seed: u64, n_events: usize) -> (EventStream, ActiveSets, ModelState) {
        let spec = StreamSpec {
            feature_dim: 2,
            ..StreamSpec::new(7, 5, n_events, seed)
        };
        let s = generate_scale_free(&spec).unwrap();
        let act = classify_active(&s, Threshold::Finite(12), Threshold::Finite(14));
        let m = ModelState::init(4, &act, &s.feature_cardinality, seed);
        (s, act, m)
    }

    #[test]
    fn empty_dnode_set_is_bitwise_coupled() {
        let (s, act, m) = instance(1, 40);
        let dag = build_dag(&s, &act).unwrap();
        let none = select_greedy(&dag, 0).unwrap();
        let negs = negatives_for(&s, 0..s.len(), 3, &mut ChaCha8Rng::seed_from_u64(0));
        let a = forward_coupled(&s, &act, &m, Some(&negs)).unwrap();
        let b = forward_decoupled(&s, &act, &m, &none, &PhiTable::new(2.0), Some(&negs)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn phi_at_coupled_values_reproduces_states() {
        let (s, act, m) = instance(2, 50);
        let res = select_greedy(&build_dag(&s, &act).unwrap(), 4).unwrap();
        assert!(!res.dnodes.members.is_empty());
        let phis = phis_from_coupled(&m, &s, &act, std::slice::from_ref(&res.dag), 1.0).unwrap();
        let a = forward_coupled(&s, &act, &m, None).unwrap();
        let b = forward_decoupled(&s, &act, &m, &res, &phis, None).unwrap();
        for i in res.dag.state_indices() {
            assert!(max_abs_diff(&a.emb[i], &b.emb[i]) <= 1e-12);
        }
        assert_eq!(b.penalty_loss, 0.0);
        assert_eq!(b.residual, 0.0);
    }

    #[test]
    fn instrumented_depth_is_dag_depth() {
        for seed in 0..5 {
            let (s, act, m) = instance(seed, 45);
            let dag = build_dag(&s, &act).unwrap();
            for k in [0, 1, 3, 6] {
                let res = select_greedy(&dag, k).unwrap();
                let phis = phis_from_coupled(&m, &s, &act, std::slice::from_ref(&res.dag), 1.0).unwrap();
                let t = forward_decoupled(&s, &act, &m, &res, &phis, None).unwrap();
                assert_eq!(t.depth, longest_path(&res.dag).unwrap().depth, "seed {seed} k {k}");
            }
        }
    }

    #[test]
    fn all_active_states_are_static() {
        let s = figure2_fixture();
        let act = ActiveSets::from_members(2, 2, &[0, 1], &[0, 1]);
        let m = ModelState::init(3, &act, &[], 4);
        let t = forward_coupled(&s, &act, &m, None).unwrap();
        let dag = build_dag(&s, &act).unwrap();
        assert_eq!(dag.state_count(), 0);
        for (i, node) in dag.nodes().iter().enumerate() {
            if let CgNode::ActiveStatic { node, partition } = node {
                assert_eq!(t.emb[i], m.psi_of(*partition, *node).unwrap());
            }
        }
        assert_eq!(t.depth, 0);
    }

    #[test]
    fn zero_events_only_roots() {
        let s = EventStream::empty(3, 3);
        let act = ActiveSets::from_members(3, 3, &[1], &[]);
        let m = ModelState::init(2, &act, &[], 0);
        let t = forward_coupled(&s, &act, &m, Some(&[])).unwrap();
        assert_eq!(t.emb, vec![m.psi[0][&1].clone()]);
        assert!(t.event_loss.is_empty());
        assert_eq!(t.total_loss, 0.0);
    }

    #[test]
    fn missing_phi_is_error() {
        let (s, act, m) = instance(3, 30);
        let res = select_greedy(&build_dag(&s, &act).unwrap(), 2).unwrap();
        let err = forward_decoupled(&s, &act, &m, &res, &PhiTable::new(1.0), None).unwrap_err();
        assert!(matches!(err, TrainError::MissingPhi(_)));
    }

    #[test]
    fn zero_alpha_drops_penalty() {
        let (s, act, m) = instance(4, 40);
        let res = select_greedy(&build_dag(&s, &act).unwrap(), 3).unwrap();
        let mut phis = phis_from_coupled(&m, &s, &act, std::slice::from_ref(&res.dag), 0.0).unwrap();
        let keys: Vec<_> = phis.keys().collect();
        for k in keys {
            phis.insert(k, vec![0.3; 4]);
        }
        let negs = negatives_for(&s, 0..s.len(), 2, &mut ChaCha8Rng::seed_from_u64(1));
        let t = forward_decoupled(&s, &act, &m, &res, &phis, Some(&negs)).unwrap();
        assert!(t.residual > 0.0);
        assert_eq!(t.total_loss, t.ranking_loss);
    }

    #[test]
    fn negatives_order_irrelevant() {
        let (s, act, m) = instance(5, 30);
        let mut negs = negatives_for(&s, 0..s.len(), 4, &mut ChaCha8Rng::seed_from_u64(2));
        let a = forward_coupled(&s, &act, &m, Some(&negs)).unwrap();
        negs.iter_mut().for_each(|n| n.reverse());
        let b = forward_coupled(&s, &act, &m, Some(&negs)).unwrap();
        for (x, y) in a.event_loss.iter().zip(&b.event_loss) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn sampler_excludes_true_item() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = sample_negatives(10, 4, 5, &mut rng);
            assert_eq!(n.len(), 5);
            assert!(n.iter().all(|&c| c != 4 && c < 10));
            let mut sorted = n.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), 5);
        }
        assert_eq!(sample_negatives(4, 1, 99, &mut rng), vec![0, 2, 3]);
        assert!(sample_negatives(1, 0, 3, &mut rng).is_empty());
    }

    /// Model and φ packed into one parameter set for the finite-difference check.
    #[derive(Clone)]
    struct Both(ModelState, PhiTable);

    impl Params for Both {
        fn blocks(&self) -> Vec<(String, &[f64])> {
            let mut b = self.0.blocks();
            b.extend(self.1.blocks());
            b
        }

        fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
            let mut b = self.0.blocks_mut();
            b.extend(self.1.blocks_mut());
            b
        }
    }

    /// Two consecutive batches, the second reading carried state.
    #[test]
    fn full_gradient_matches_finite_differences() {
        for seed in 0..3u64 {
            let (s, act, m) = instance(10 + seed, 36);
            let dags: Vec<CompDag> = [0..18, 18..36]
                .into_iter()
                .map(|r| select_greedy(&build_dag_range(&s, &act, r).unwrap(), 3).unwrap().dag)
                .collect();
            let mut phis = phis_from_coupled(&m, &s, &act, &dags, 0.7).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let keys: Vec<_> = phis.keys().collect();
            for k in keys {
                let v: Vec<f64> = phis.get(&k).unwrap().iter().map(|x| x + rng.gen_range(-0.2..0.2)).collect();
                phis.insert(k, v);
            }
            let (first, _) = forward_dag(&m, &phis, &s, &act, &dags[0], None, &Carry::new()).unwrap();
            let mut carry = Carry::new();
            carry.advance(&s, &dags[0], &first);
            let negs = negatives_for(&s, dags[1].event_range(), 3, &mut rng);

            let p = Both(m, phis);
            let (trace, tape) = forward_dag(&p.0, &p.1, &s, &act, &dags[1], Some(&negs), &carry).unwrap();
            assert!(trace.penalty_loss > 0.0);
            let (gm, gp) = backward(&p.0, &p.1, &trace, &tape);
            let n = numeric_grad(&p, FD_EPS, |q| {
                forward_dag(&q.0, &q.1, &s, &act, &dags[1], Some(&negs), &carry).unwrap().0.total_loss
            });
            let (block, err) = worst(&compare(&Both(gm, gp), &n));
            assert!(err <= 1e-4, "seed {seed}: {block} rel {err}");
        }
    }
}
