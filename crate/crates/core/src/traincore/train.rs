//! Per-batch gradient descent on ranking loss plus the φ penalty.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forward::{backward_damped, forward_dag, negatives_for, phis_from_coupled, Carry};
use super::gradcheck::Params;
use super::model::{ModelState, PhiTable};
use super::TrainError;
use crate::compgraph::{build_dag_range, CgNode, CompDag};
use crate::dnode_select::{select, Strategy};
use crate::ingest::{ActiveSets, BatchPlan, EventStream};

/// Stream used to draw training negatives, kept apart from the init stream.
const NEGATIVE_STREAM: u64 = 0x6e65_6761;

/// How a step treats the quadratic penalty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyStep {
    /// Explicit step on the ranking gradient, implicit step on the penalty,
    /// φ first. For φ the step is exact: `φ ← (φ − lr·g + lr·α·emb) / (1 + lr·α)`,
    /// which leaves `1 / (1 + lr·α)` of the gap. The parameters then take the
    /// same damped step, linearised, on that remaining gap, so the penalty's
    /// gradient on computed states is scaled by `1 / (1 + lr·α)²`. Matches
    /// plain gradient descent to first order in `lr·α` and stays stable as
    /// `α → ∞`, where φ is projected onto the computed state.
    #[default]
    Proximal,
    /// Plain gradient step on the full objective; diverges once `lr·α` is large.
    Gradient,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dim: usize,
    pub alpha: f64,
    pub lr: f64,
    pub epochs: usize,
    pub n_negatives: usize,
    pub seed: u64,
    #[serde(default)]
    pub penalty_step: PenaltyStep,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: 8,
            alpha: 1.0,
            lr: 0.05,
            epochs: 5,
            n_negatives: 10,
            seed: 0,
            penalty_step: PenaltyStep::Proximal,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.dim == 0 {
            return Err(TrainError::Config("dim must be at least 1".into()));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(TrainError::Config(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(TrainError::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    /// Mean per-batch objective (ranking + penalty) in each epoch.
    pub loss_curve: Vec<f64>,
    /// Mean per-event ranking loss in each epoch.
    pub ranking_curve: Vec<f64>,
    pub penalty_curve: Vec<f64>,
    /// Sum over batches of the instrumented sequential depth, per epoch.
    pub steps_per_epoch: Vec<usize>,
    /// `max ‖φ − emb‖` after the last update.
    pub constraint_residual: f64,
    pub n_dnodes: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelState,
    pub phis: PhiTable,
    pub metrics: TrainMetrics,
}

/// One DAG per batch, decoupled by `strategy` with parameter `k_or_parts`.
pub fn batch_dags(
    stream: &EventStream,
    actives: &ActiveSets,
    plan: &BatchPlan,
    strategy: Strategy,
    k_or_parts: usize,
) -> Result<Vec<CompDag>, TrainError> {
    plan.boundaries
        .iter()
        .map(|r| {
            let dag = build_dag_range(stream, actives, r.clone())?;
            Ok(select(&dag, strategy, k_or_parts)?.dag)
        })
        .collect()
}

fn count_replicas(dags: &[CompDag]) -> usize {
    dags.iter()
        .map(|d| d.nodes().iter().filter(|n| matches!(n, CgNode::Replica { .. })).count())
        .sum()
}

fn check_batches(stream: &EventStream, dags: &[CompDag]) -> Result<usize, TrainError> {
    let mut end = 0;
    let mut n_events = 0;
    for dag in dags {
        let r = dag.event_range();
        if r.start < end || r.end > stream.len() {
            return Err(TrainError::Config(format!(
                "batch ranges must be increasing and inside the stream, got {r:?} after {end}"
            )));
        }
        end = r.end;
        n_events += r.len();
    }
    Ok(n_events)
}

/// Updates the φ vectors penalised in the last pass; `states` pairs each
/// φ slot with the state it was compared against.
fn apply_phi_step(phis: &mut PhiTable, gphi: &PhiTable, states: &[(usize, Vec<f64>)], lr: f64, rule: PenaltyStep) {
    match rule {
        PenaltyStep::Gradient => phis.axpy(-lr, gphi),
        PenaltyStep::Proximal => {
            let a = phis.alpha;
            for (slot, emb) in states {
                let g = gphi.value(*slot).to_vec();
                let phi = phis.value_mut(*slot);
                for ((p, gi), e) in phi.iter_mut().zip(&g).zip(emb) {
                    // remove the explicit penalty gradient a·(φ − e) from g
                    let g_rank = gi - a * (*p - e);
                    *p = (*p - lr * g_rank + lr * a * e) / (1.0 + lr * a);
                }
            }
        }
    }
}

/// Trains on the events covered by `dags`, which must be consecutive batches
/// of `stream`. φ starts at the states a coupled pass computes with the
/// initial parameters.
pub fn train(
    stream: &EventStream,
    actives: &ActiveSets,
    dags: &[CompDag],
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if check_batches(stream, dags)? == 0 {
        return Err(TrainError::NoEvents);
    }
    let mut model = ModelState::init(config.dim, actives, &stream.feature_cardinality, config.seed);
    let mut phis = phis_from_coupled(&model, stream, actives, dags, config.alpha)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ NEGATIVE_STREAM);
    let mut metrics = TrainMetrics {
        n_dnodes: count_replicas(dags),
        ..TrainMetrics::default()
    };

    for epoch in 0..config.epochs {
        let mut carry = Carry::new();
        let (mut objective, mut ranking, mut penalty) = (0.0, 0.0, 0.0);
        let (mut n_events, mut steps) = (0usize, 0usize);
        for (b, dag) in dags.iter().enumerate() {
            let negs = negatives_for(stream, dag.event_range(), config.n_negatives, &mut rng);
            let (trace, tape) = forward_dag(&model, &phis, stream, actives, dag, Some(&negs), &carry)?;
            let diverged = |model: &ModelState, phis: &PhiTable| TrainError::Diverged {
                epoch,
                batch: b,
                last: Box::new((model.clone(), phis.clone())),
            };
            if !trace.total_loss.is_finite() {
                return Err(diverged(&model, &phis));
            }
            let damp = match config.penalty_step {
                PenaltyStep::Proximal => (1.0 + config.lr * config.alpha).powi(-2),
                PenaltyStep::Gradient => 1.0,
            };
            let (g, gphi) = backward_damped(&model, &phis, &trace, &tape, damp);
            if !g.all_finite() || !gphi.all_finite() {
                return Err(diverged(&model, &phis));
            }
            let states: Vec<(usize, Vec<f64>)> = trace
                .penalties
                .iter()
                .map(|t| (phis.slot(&t.key).expect("penalised d-node has φ"), trace.emb[t.state].clone()))
                .collect();
            let (mut next_model, mut next_phis) = (model.clone(), phis.clone());
            next_model.axpy(-config.lr, &g);
            apply_phi_step(&mut next_phis, &gphi, &states, config.lr, config.penalty_step);
            if !next_model.all_finite() || !next_phis.all_finite() {
                return Err(diverged(&model, &phis));
            }
            carry.advance(stream, dag, &trace);
            model = next_model;
            phis = next_phis;

            objective += trace.total_loss;
            ranking += trace.event_loss.iter().sum::<f64>();
            penalty += trace.penalty_loss;
            n_events += trace.event_loss.len();
            steps += trace.depth;
        }
        metrics.loss_curve.push(objective / dags.len() as f64);
        metrics.ranking_curve.push(ranking / n_events.max(1) as f64);
        metrics.penalty_curve.push(penalty);
        metrics.steps_per_epoch.push(steps);
    }

    metrics.constraint_residual = constraint_residual(&model, &phis, stream, actives, dags)?;
    Ok(TrainOutcome { model, phis, metrics })
}

/// `max ‖φ − emb‖` over all d-nodes, from a loss-free pass.
pub fn constraint_residual(
    model: &ModelState,
    phis: &PhiTable,
    stream: &EventStream,
    actives: &ActiveSets,
    dags: &[CompDag],
) -> Result<f64, TrainError> {
    let mut carry = Carry::new();
    let mut worst: f64 = 0.0;
    for dag in dags {
        let (trace, _) = forward_dag(model, phis, stream, actives, dag, None, &carry)?;
        worst = worst.max(trace.residual);
        carry.advance(stream, dag, &trace);
    }
    Ok(worst)
}
