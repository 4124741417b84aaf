//! Synthetic interaction streams: preferential-attachment (scale-free),
//! uniform, and the hand-built eight-event fixture.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{Event, EventStream};

/// Categories per generated item feature column.
pub const FEATURE_CATEGORIES: u32 = 8;

/// Maximum number of events between two consecutive node joins.
pub const JOIN_GAP: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid stream spec: {field} {reason}")]
    Invalid { field: &'static str, reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub n_events: usize,
    /// Attachment weight is `(degree + 1)^attachment_exponent`.
    pub attachment_exponent: f64,
    pub seed: u64,
    /// Number of categorical item-feature columns emitted per event.
    pub feature_dim: usize,
    pub label_cardinality: usize,
}

impl Default for StreamSpec {
    fn default() -> Self {
        StreamSpec {
            n_users: 100,
            n_items: 100,
            n_events: 1000,
            attachment_exponent: 1.0,
            seed: 0,
            feature_dim: 0,
            label_cardinality: 1,
        }
    }
}

impl StreamSpec {
    pub fn new(n_users: usize, n_items: usize, n_events: usize, seed: u64) -> Self {
        StreamSpec {
            n_users,
            n_items,
            n_events,
            seed,
            ..StreamSpec::default()
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_users == 0 {
            return Err(SynthError::Invalid {
                field: "n_users",
                reason: "must be at least 1".into(),
            });
        }
        if self.n_items == 0 {
            return Err(SynthError::Invalid {
                field: "n_items",
                reason: "must be at least 1".into(),
            });
        }
        if !self.attachment_exponent.is_finite() || self.attachment_exponent < 0.0 {
            return Err(SynthError::Invalid {
                field: "attachment_exponent",
                reason: format!("must be finite and nonnegative, got {}", self.attachment_exponent),
            });
        }
        Ok(())
    }
}

/// Fenwick tree over nonnegative weights, for O(log n) weighted draws.
struct WeightTree {
    tree: Vec<f64>,
    weights: Vec<f64>,
}

impl WeightTree {
    fn new(n: usize) -> Self {
        WeightTree {
            tree: vec![0.0; n + 1],
            weights: vec![0.0; n],
        }
    }

    fn set(&mut self, i: usize, w: f64) {
        let delta = w - self.weights[i];
        self.weights[i] = w;
        let mut k = i + 1;
        while k < self.tree.len() {
            self.tree[k] += delta;
            k += k & k.wrapping_neg();
        }
    }

    fn total(&self) -> f64 {
        let mut k = self.weights.len();
        let mut s = 0.0;
        while k > 0 {
            s += self.tree[k];
            k &= k - 1;
        }
        s
    }

    /// Smallest index whose prefix sum exceeds `target`.
    fn find(&self, mut target: f64) -> usize {
        let n = self.weights.len();
        let mut pos = 0;
        let mut step = n.next_power_of_two();
        while step > 0 {
            let next = pos + step;
            if next <= n && self.tree[next] <= target {
                pos = next;
                target -= self.tree[next];
            }
            step >>= 1;
        }
        // guard against rounding past the last positive weight
        let mut idx = pos.min(n - 1);
        while self.weights[idx] == 0.0 && idx > 0 {
            idx -= 1;
        }
        idx
    }
}

/// Preferential attachment over a growing node pool. Node `k` joins the pool
/// at event `min(k·JOIN_GAP, floor(k·n_events/n_nodes))` and takes that
/// event, so every node appears once `n_events ≥ n_nodes`; all other events
/// pick a pooled node with probability proportional to
/// `(degree + 1)^exponent`.
///
/// The join gap bounds the head start of early nodes. Spreading joins over
/// the whole stream lets the first node absorb almost every event, while
/// joining everything at once degenerates into a flat Pólya urn.
struct Attachment {
    exponent: f64,
    n_nodes: usize,
    n_events: usize,
    joined: usize,
    degree: Vec<u64>,
    weights: WeightTree,
}

impl Attachment {
    fn new(n_nodes: usize, n_events: usize, exponent: f64) -> Self {
        Attachment {
            exponent,
            n_nodes,
            n_events,
            joined: 0,
            degree: vec![0; n_nodes],
            weights: WeightTree::new(n_nodes),
        }
    }

    fn join_time(&self, k: usize) -> usize {
        let even = (k as u128 * self.n_events as u128 / self.n_nodes as u128) as usize;
        even.min(k * JOIN_GAP)
    }

    fn weight(&self, degree: u64) -> f64 {
        (degree as f64 + 1.0).powf(self.exponent)
    }

    fn draw<R: Rng>(&mut self, t: usize, rng: &mut R) -> u32 {
        let mut fresh = None;
        while self.joined < self.n_nodes && self.join_time(self.joined) <= t {
            let k = self.joined;
            self.weights.set(k, self.weight(0));
            fresh.get_or_insert(k);
            self.joined += 1;
        }
        let pick = match fresh {
            Some(k) => k,
            None => {
                let target = rng.gen::<f64>() * self.weights.total();
                self.weights.find(target)
            }
        };
        self.degree[pick] += 1;
        self.weights.set(pick, self.weight(self.degree[pick]));
        pick as u32
    }
}

fn item_features<R: Rng>(spec: &StreamSpec, rng: &mut R) -> Vec<Vec<u32>> {
    (0..spec.n_items)
        .map(|_| (0..spec.feature_dim).map(|_| rng.gen_range(0..FEATURE_CATEGORIES)).collect())
        .collect()
}

fn assemble<R: Rng>(
    spec: &StreamSpec,
    rng: &mut R,
    mut pick: impl FnMut(usize, &mut R) -> (u32, u32),
) -> EventStream {
    let features = item_features(spec, rng);
    let events = (0..spec.n_events)
        .map(|t| {
            let (user, item) = pick(t, rng);
            let label = if spec.label_cardinality > 1 {
                rng.gen_range(0..spec.label_cardinality as i64)
            } else {
                0
            };
            Event {
                user,
                item,
                time: (t + 1) as f64,
                label,
                features: features[item as usize].clone(),
            }
        })
        .collect();
    let mut stream = EventStream::empty(spec.n_users, spec.n_items);
    stream.events = events;
    stream.feature_cardinality = vec![FEATURE_CATEGORIES; spec.feature_dim];
    stream
}

/// Heavy-tailed stream: users and items both chosen by preferential attachment.
pub fn generate_scale_free(spec: &StreamSpec) -> Result<EventStream, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut users = Attachment::new(spec.n_users, spec.n_events, spec.attachment_exponent);
    let mut items = Attachment::new(spec.n_items, spec.n_events, spec.attachment_exponent);
    Ok(assemble(spec, &mut rng, |t, rng| (users.draw(t, rng), items.draw(t, rng))))
}

/// Control stream: users and items drawn uniformly at random.
pub fn generate_uniform(spec: &StreamSpec) -> Result<EventStream, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (nu, ni) = (spec.n_users as u32, spec.n_items as u32);
    Ok(assemble(spec, &mut rng, |_, rng| (rng.gen_range(0..nu), rng.gen_range(0..ni))))
}

/// Eight events over two users and two items. Without active nodes its
/// computational DAG has depth 6; three d-nodes bring it down to 3.
pub fn figure2_fixture() -> EventStream {
    let pairs = [(0, 0), (1, 1), (0, 1), (1, 0), (0, 0), (0, 0), (0, 0), (1, 0)];
    let events = pairs
        .iter()
        .enumerate()
        .map(|(t, &(u, i))| Event::new(u, i, (t + 1) as f64))
        .collect();
    EventStream::new(events, 2, 2).expect("fixture ids are in range")
}
