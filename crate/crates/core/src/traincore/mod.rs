//! Desk-scale embedding model: GRU state updates, an MLP prediction head with
//! a softmax ranking loss, and training in which decoupled states are
//! replaced by free vectors held near the computed states by a quadratic
//! penalty. Gradients are written out by hand and checked against finite
//! differences.

pub mod eval;
pub mod forward;
pub mod gradcheck;
pub mod gru;
pub mod linalg;
pub mod loss;
pub mod mlp;
pub mod model;
pub mod toy;
pub mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compgraph::DagError;
use crate::dnode_select::{DNodeKey, SelectError};
use crate::ingest::Partition;

pub use eval::{evaluate, rank_of_true, ranking_metrics, EvalConfig, EvalMetrics};
pub use forward::{
    backward, forward_coupled, forward_dag, forward_decoupled, negatives_for, phis_from_coupled, predict, recouple,
    sample_negatives, Carry, ForwardTrace, PenaltyTerm, Tape,
};
pub use gradcheck::Params;
pub use gru::{gru_backward, gru_forward, gru_update, GruCache, GruParams};
pub use mlp::{Mlp, MlpCache};
pub use loss::{softmax_loss, softmax_loss_grad};
pub use model::{ModelState, PhiTable};
pub use toy::{toy_six_layer, ToyConfig, ToyReport};
pub use train::{batch_dags, constraint_residual, train, PenaltyStep, TrainConfig, TrainMetrics, TrainOutcome};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("empty candidate set")]
    EmptyCandidates,
    #[error("no φ entry for d-node ({}, {}, {})", .0.node, .0.event, .0.partition)]
    MissingPhi(DNodeKey),
    #[error("no static embedding for active {partition} {node}")]
    MissingPsi { partition: Partition, node: u32 },
    #[error("DAG does not match the stream: {0}")]
    DagMismatch(String),
    #[error("no training events")]
    NoEvents,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("loss diverged at epoch {epoch}, batch {batch}")]
    Diverged {
        epoch: usize,
        batch: usize,
        /// Parameters before the failing step.
        last: Box<(ModelState, PhiTable)>,
    },
    #[error(transparent)]
    Dag(#[from] DagError),
    #[error(transparent)]
    Select(#[from] SelectError),
}

/// Model checkpoint with shape metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub dim: usize,
    pub feature_cardinality: Vec<usize>,
    pub n_dnodes: usize,
    pub model: ModelState,
    pub phis: PhiTable,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn new(model: ModelState, phis: PhiTable) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            dim: model.dim,
            feature_cardinality: model.features.iter().map(|t| t.rows).collect(),
            n_dnodes: phis.len(),
            model,
            phis,
        }
    }
}
