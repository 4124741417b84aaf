//! Ranking evaluation: MRR and Recall@10 against sampled negatives.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forward::{predict, sample_negatives};
use super::gru::gru_forward;
use super::model::ModelState;
use super::TrainError;
use crate::ingest::{ActiveSets, Event, EventStream, Partition};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_negatives: usize,
    pub seed: u64,
    /// Let active nodes evolve from ψ once past the training period.
    pub evolve_active: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_negatives: 499,
            seed: 0,
            evolve_active: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub mrr: f64,
    pub recall_at_10: f64,
    pub n_events: usize,
}

/// 1-based rank of `scores[0]`; ties with it count half.
pub fn rank_of_true(scores: &[f64]) -> f64 {
    let t = scores[0];
    let above = scores[1..].iter().filter(|&&s| s > t).count();
    let tied = scores[1..].iter().filter(|&&s| s == t).count();
    1.0 + above as f64 + tied as f64 / 2.0
}

pub fn ranking_metrics(ranks: &[f64]) -> EvalMetrics {
    let n = ranks.len();
    if n == 0 {
        return EvalMetrics {
            mrr: 0.0,
            recall_at_10: 0.0,
            n_events: 0,
        };
    }
    EvalMetrics {
        mrr: ranks.iter().map(|r| 1.0 / r).sum::<f64>() / n as f64,
        recall_at_10: ranks.iter().filter(|&&r| r <= 10.0).count() as f64 / n as f64,
        n_events: n,
    }
}

/// Embedding state replayed outside the DAG machinery, without gradients.
struct Replay<'a> {
    model: &'a ModelState,
    actives: &'a ActiveSets,
    states: [HashMap<u32, Vec<f64>>; 2],
    last_features: HashMap<u32, Vec<u32>>,
}

impl<'a> Replay<'a> {
    fn state(&self, p: Partition, u: u32) -> &[f64] {
        if let Some(s) = self.states[p.index()].get(&u) {
            return s;
        }
        self.model.psi_of(p, u).unwrap_or(&self.model.xi[p.index()])
    }

    fn step(&mut self, e: &Event, evolve_active: bool) {
        let feat = self.model.embed_features(&e.features);
        let pre = [
            self.state(Partition::User, e.user).to_vec(),
            self.state(Partition::Item, e.item).to_vec(),
        ];
        for p in [Partition::User, Partition::Item] {
            let node = e.endpoint(p);
            if self.actives.is_active(p, node) && !evolve_active {
                continue;
            }
            let (out, _) = gru_forward(&pre[p.index()], &pre[p.other().index()], &feat, &self.model.theta[p.index()]);
            self.states[p.index()].insert(node, out);
        }
        self.last_features.insert(e.user, e.features.clone());
    }
}

/// Replays `history` (actives stay static, as in training), then ranks the
/// true item of every `test` event before applying that event.
pub fn evaluate(
    history: &EventStream,
    test: &EventStream,
    actives: &ActiveSets,
    model: &ModelState,
    config: &EvalConfig,
) -> Result<EvalMetrics, TrainError> {
    if test.n_items != history.n_items || test.n_users != history.n_users {
        return Err(TrainError::Config("history and test streams disagree on node counts".into()));
    }
    for p in [Partition::User, Partition::Item] {
        for u in actives.members(p) {
            model.psi_of(p, u).ok_or(TrainError::MissingPsi { partition: p, node: u })?;
        }
    }
    let mut replay = Replay {
        model,
        actives,
        states: [HashMap::new(), HashMap::new()],
        last_features: HashMap::new(),
    };
    for e in &history.events {
        replay.step(e, false);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut ranks = Vec::with_capacity(test.len());
    for e in &test.events {
        let negs = sample_negatives(test.n_items, e.item, config.n_negatives, &mut rng);
        let mut cands: Vec<&[f64]> = vec![replay.state(Partition::Item, e.item)];
        cands.extend(negs.iter().map(|&c| replay.state(Partition::Item, c)));
        let scores = predict(
            model,
            replay.state(Partition::User, e.user),
            replay.last_features.get(&e.user).map(Vec::as_slice),
            &cands,
        );
        ranks.push(rank_of_true(&scores));
        replay.step(e, config.evolve_active);
    }
    Ok(ranking_metrics(&ranks))
}
