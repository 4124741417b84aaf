//! Learnable state: GRU operators, init vectors, static embeddings of active
//! nodes, prediction head, feature tables, and the per-d-node φ vectors.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::gradcheck::Params;
use super::gru::GruParams;
use super::linalg::{uniform_vec, Mat};
use super::mlp::Mlp;
use crate::dnode_select::DNodeKey;
use crate::ingest::{ActiveSets, Partition};

/// Scale of the uniform init for embedding-like vectors.
const EMBED_INIT: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub dim: usize,
    /// Update operators, indexed by [`Partition::index`]: users, then items.
    pub theta: [GruParams; 2],
    /// Shared initial embeddings of inactive nodes.
    pub xi: [Vec<f64>; 2],
    /// Static embeddings of active nodes.
    pub psi: [BTreeMap<u32, Vec<f64>>; 2],
    pub head: Mlp,
    /// One `cardinality × dim` table per categorical feature column.
    pub features: Vec<Mat>,
    /// Stands in for the last-item feature on a user's first event.
    pub sentinel: Vec<f64>,
}

impl ModelState {
    /// GRU input is `[partner state ‖ event feature]`, head input is
    /// `[user state ‖ last-item feature]`; all pieces have width `dim`.
    pub fn init(dim: usize, actives: &ActiveSets, feature_cardinality: &[u32], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = [GruParams::init(dim, 2 * dim, &mut rng), GruParams::init(dim, 2 * dim, &mut rng)];
        let xi = [uniform_vec(dim, EMBED_INIT, &mut rng), uniform_vec(dim, EMBED_INIT, &mut rng)];
        let mut psi = [BTreeMap::new(), BTreeMap::new()];
        for p in [Partition::User, Partition::Item] {
            for node in actives.members(p) {
                psi[p.index()].insert(node, uniform_vec(dim, EMBED_INIT, &mut rng));
            }
        }
        let head = Mlp::init(2 * dim, dim, dim, &mut rng);
        let features = feature_cardinality
            .iter()
            .map(|&c| Mat::uniform(c as usize, dim, EMBED_INIT, &mut rng))
            .collect();
        let sentinel = uniform_vec(dim, EMBED_INIT, &mut rng);
        ModelState {
            dim,
            theta,
            xi,
            psi,
            head,
            features,
            sentinel,
        }
    }

    /// Sum of the column embeddings of a categorical feature row. Columns
    /// beyond the model's tables and out-of-range categories are ignored.
    pub fn embed_features(&self, cats: &[u32]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (table, &c) in self.features.iter().zip(cats) {
            if (c as usize) < table.rows {
                out.iter_mut().zip(table.row(c as usize)).for_each(|(o, v)| *o += v);
            }
        }
        out
    }

    pub(crate) fn embed_features_backward(&self, cats: &[u32], g: &[f64], grads: &mut ModelState) {
        for (table, &c) in grads.features.iter_mut().zip(cats) {
            if (c as usize) < table.rows {
                table.row_mut(c as usize).iter_mut().zip(g).for_each(|(t, v)| *t += v);
            }
        }
    }

    pub fn psi_of(&self, p: Partition, node: u32) -> Option<&[f64]> {
        self.psi[p.index()].get(&node).map(Vec::as_slice)
    }
}

impl Params for ModelState {
    fn blocks(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (t, name) in self.theta.iter().zip(["theta1", "theta2"]) {
            out.extend(t.blocks().into_iter().map(|(n, b)| (format!("{name}.{n}"), b)));
        }
        out.push(("xi1".into(), &self.xi[0][..]));
        out.push(("xi2".into(), &self.xi[1][..]));
        for (map, side) in self.psi.iter().zip(["user", "item"]) {
            out.extend(map.iter().map(|(k, v)| (format!("psi.{side}{k}"), &v[..])));
        }
        out.extend(self.head.blocks().into_iter().map(|(n, b)| (format!("head.{n}"), b)));
        out.extend(self.features.iter().enumerate().map(|(i, t)| (format!("feat{i}"), &t.data[..])));
        out.push(("sentinel".into(), &self.sentinel[..]));
        out
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for (t, name) in self.theta.iter_mut().zip(["theta1", "theta2"]) {
            out.extend(t.blocks_mut().into_iter().map(|(n, b)| (format!("{name}.{n}"), b)));
        }
        let [x1, x2] = &mut self.xi;
        out.push(("xi1".into(), &mut x1[..]));
        out.push(("xi2".into(), &mut x2[..]));
        for (map, side) in self.psi.iter_mut().zip(["user", "item"]) {
            out.extend(map.iter_mut().map(|(k, v)| (format!("psi.{side}{k}"), &mut v[..])));
        }
        out.extend(self.head.blocks_mut().into_iter().map(|(n, b)| (format!("head.{n}"), b)));
        out.extend(
            self.features
                .iter_mut()
                .enumerate()
                .map(|(i, t)| (format!("feat{i}"), &mut t.data[..])),
        );
        out.push(("sentinel".into(), &mut self.sentinel[..]));
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhiEntry {
    pub key: DNodeKey,
    pub value: Vec<f64>,
}

/// Free vectors standing in for decoupled states, plus the penalty weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhiTable {
    pub alpha: f64,
    /// Sorted by key.
    entries: Vec<PhiEntry>,
}

impl PhiTable {
    pub fn new(alpha: f64) -> Self {
        PhiTable {
            alpha,
            entries: Vec::new(),
        }
    }

    /// Inserts or overwrites.
    pub fn insert(&mut self, key: DNodeKey, value: Vec<f64>) {
        match self.entries.binary_search_by(|e| e.key.cmp(&key)) {
            Ok(i) => self.entries[i].value = value,
            Err(i) => self.entries.insert(i, PhiEntry { key, value }),
        }
    }

    pub fn slot(&self, key: &DNodeKey) -> Option<usize> {
        self.entries.binary_search_by(|e| e.key.cmp(key)).ok()
    }

    pub fn get(&self, key: &DNodeKey) -> Option<&[f64]> {
        self.slot(key).map(|i| &self.entries[i].value[..])
    }

    pub(crate) fn value(&self, slot: usize) -> &[f64] {
        &self.entries[slot].value
    }

    pub(crate) fn value_mut(&mut self, slot: usize) -> &mut Vec<f64> {
        &mut self.entries[slot].value
    }

    pub fn entries(&self) -> &[PhiEntry] {
        &self.entries
    }

    pub fn keys(&self) -> impl Iterator<Item = DNodeKey> + '_ {
        self.entries.iter().map(|e| e.key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Params for PhiTable {
    fn blocks(&self) -> Vec<(String, &[f64])> {
        self.entries
            .iter()
            .map(|e| (phi_name(&e.key), &e.value[..]))
            .collect()
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        self.entries
            .iter_mut()
            .map(|e| (phi_name(&e.key), &mut e.value[..]))
            .collect()
    }
}

fn phi_name(k: &DNodeKey) -> String {
    format!("phi.{}{}@{}", k.partition, k.node, k.event)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psi_exactly_on_actives() {
        let act = ActiveSets::from_members(5, 4, &[1, 3], &[0]);
        let m = ModelState::init(4, &act, &[3, 2], 7);
        assert_eq!(m.psi[0].keys().copied().collect::<Vec<_>>(), vec![1, 3]);
        assert_eq!(m.psi[1].keys().copied().collect::<Vec<_>>(), vec![0]);
        assert!(m.xi.iter().chain(m.psi[0].values()).all(|v| v.len() == 4));
        assert_eq!(m.features[1].rows, 2);
    }

    #[test]
    fn params_roundtrip_through_blocks() {
        let act = ActiveSets::from_members(3, 3, &[2], &[]);
        let m = ModelState::init(3, &act, &[4], 1);
        let mut z = m.zeros_like();
        assert_eq!(z.n_scalars(), m.n_scalars());
        z.axpy(2.0, &m);
        z.axpy(-1.0, &m);
        assert_eq!(z, m);
    }

    #[test]
    fn phi_table_sorted() {
        let key = |node, event| DNodeKey {
            node,
            event,
            partition: Partition::User,
        };
        let mut t = PhiTable::new(1.0);
        t.insert(key(3, 9), vec![1.0]);
        t.insert(key(1, 2), vec![2.0]);
        t.insert(key(3, 9), vec![5.0]);
        assert_eq!(t.len(), 2);
        assert_eq!(t.get(&key(3, 9)), Some(&[5.0][..]));
        assert_eq!(t.keys().next(), Some(key(1, 2)));
        assert!(t.get(&key(0, 0)).is_none());
    }
}
