//! Six-layer scalar tanh chain, decoupled at `h3`.
//!
//! Coupled: `x → h1 → … → h6` with `h_i = tanh(w_i h_{i-1})`. Decoupled: the
//! second half starts from a free scalar `φ3`, and the objective
//! `½(h6 − y)² + (α/2)(h3 − φ3)²` ties it back to `h3`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compgraph::{CgNode, CompDag};
use crate::depth_sched::longest_path;
use crate::dnode_select::decouple;
use crate::ingest::Partition;

pub const TOY_LAYERS: usize = 6;
/// Index of the decoupled layer, 1-based as in `h3`.
pub const TOY_CUT: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub alpha: f64,
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    pub x: f64,
    pub target: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            alpha: 1.0,
            lr: 0.05,
            steps: 2000,
            seed: 0,
            x: 1.0,
            target: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyReport {
    pub coupled_depth: usize,
    pub decoupled_depth: usize,
    /// Sequential steps of each independent segment, counted while evaluating.
    pub segment_lengths: Vec<usize>,
    /// `|decoupled h6 − coupled h6|` with `φ3` set to the coupled `h3`.
    pub equivalence_gap: f64,
    pub initial_penalty: f64,
    pub initial_objective: f64,
    pub final_objective: f64,
    /// `|h3 − φ3|` after training.
    pub residual: f64,
    /// `|decoupled h6 − coupled h6|` after training.
    pub output_gap: f64,
    pub weights: [f64; TOY_LAYERS],
    pub phi3: f64,
}

/// Runs layers `from..to` (0-based) starting at `input`, returning every
/// activation and the number of sequential steps taken.
fn run_segment(w: &[f64; TOY_LAYERS], input: f64, from: usize, to: usize) -> (Vec<f64>, usize) {
    let mut acts = Vec::with_capacity(to - from);
    let mut h = input;
    for wi in &w[from..to] {
        h = (wi * h).tanh();
        acts.push(h);
    }
    (acts, to - from)
}

pub fn toy_coupled(w: &[f64; TOY_LAYERS], x: f64) -> f64 {
    *run_segment(w, x, 0, TOY_LAYERS).0.last().expect("six layers")
}

/// `(h3, h6)` of the decoupled network.
pub fn toy_decoupled(w: &[f64; TOY_LAYERS], phi3: f64, x: f64) -> (f64, f64) {
    let (a, _) = run_segment(w, x, 0, TOY_CUT);
    let (b, _) = run_segment(w, phi3, TOY_CUT, TOY_LAYERS);
    (a[TOY_CUT - 1], b[TOY_LAYERS - TOY_CUT - 1])
}

pub fn toy_objective(w: &[f64; TOY_LAYERS], phi3: f64, cfg: &ToyConfig) -> f64 {
    let (h3, h6) = toy_decoupled(w, phi3, cfg.x);
    0.5 * (h6 - cfg.target).powi(2) + 0.5 * cfg.alpha * (h3 - phi3).powi(2)
}

/// Hand-derived gradient of [`toy_objective`] w.r.t. `(w, φ3)`.
pub fn toy_gradient(w: &[f64; TOY_LAYERS], phi3: f64, cfg: &ToyConfig) -> ([f64; TOY_LAYERS], f64) {
    let (a, _) = run_segment(w, cfg.x, 0, TOY_CUT);
    let (b, _) = run_segment(w, phi3, TOY_CUT, TOY_LAYERS);
    let mut gw = [0.0; TOY_LAYERS];

    // second segment, from the loss back to φ3
    let mut g = b[b.len() - 1] - cfg.target;
    for i in (TOY_CUT..TOY_LAYERS).rev() {
        let h = b[i - TOY_CUT];
        let prev = if i == TOY_CUT { phi3 } else { b[i - TOY_CUT - 1] };
        let local = g * (1.0 - h * h);
        gw[i] = local * prev;
        g = local * w[i];
    }
    let h3 = a[TOY_CUT - 1];
    let gphi = g + cfg.alpha * (phi3 - h3);

    // first segment, from the penalty back to w1
    let mut g = cfg.alpha * (h3 - phi3);
    for i in (0..TOY_CUT).rev() {
        let h = a[i];
        let prev = if i == 0 { cfg.x } else { a[i - 1] };
        let local = g * (1.0 - h * h);
        gw[i] = local * prev;
        g = local * w[i];
    }
    (gw, gphi)
}

/// `x → h1 → … → h6` as a computational DAG.
pub fn toy_dag() -> CompDag {
    let mut nodes = vec![CgNode::Init {
        node: 0,
        partition: Partition::User,
    }];
    nodes.extend((0..TOY_LAYERS).map(|event| CgNode::State {
        node: 0,
        partition: Partition::User,
        event,
    }));
    CompDag::from_parts(nodes, (0..TOY_LAYERS).map(|i| (i, i + 1)).collect())
}

pub fn toy_six_layer(cfg: &ToyConfig) -> ToyReport {
    let dag = toy_dag();
    let coupled_depth = longest_path(&dag).expect("chain is acyclic").depth;
    let split = decouple(&dag, TOY_CUT).expect("h3 is a State node");
    let decoupled_depth = longest_path(&split).expect("still acyclic").depth;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut w = [0.0; TOY_LAYERS];
    w.iter_mut().for_each(|wi| *wi = rng.gen_range(0.5..1.5));
    let mut phi3 = toy_decoupled(&w, 0.0, cfg.x).0;
    let equivalence_gap = (toy_decoupled(&w, phi3, cfg.x).1 - toy_coupled(&w, cfg.x)).abs();
    let initial_penalty = 0.5 * cfg.alpha * (toy_decoupled(&w, phi3, cfg.x).0 - phi3).powi(2);
    let initial_objective = toy_objective(&w, phi3, cfg);

    for _ in 0..cfg.steps {
        let (gw, gphi) = toy_gradient(&w, phi3, cfg);
        w.iter_mut().zip(gw).for_each(|(wi, g)| *wi -= cfg.lr * g);
        phi3 -= cfg.lr * gphi;
    }

    let (h3, h6) = toy_decoupled(&w, phi3, cfg.x);
    let segment_lengths = vec![
        run_segment(&w, cfg.x, 0, TOY_CUT).1,
        run_segment(&w, phi3, TOY_CUT, TOY_LAYERS).1,
    ];
    ToyReport {
        coupled_depth,
        decoupled_depth,
        segment_lengths,
        equivalence_gap,
        initial_penalty,
        initial_objective,
        final_objective: toy_objective(&w, phi3, cfg),
        residual: (h3 - phi3).abs(),
        output_gap: (h6 - toy_coupled(&w, cfg.x)).abs(),
        weights: w,
        phi3,
    }
}
