//! Depth analysis and decoupled training for dynamic-graph embedding models.
//!
//! A stream of bipartite interaction events induces a computational DAG whose
//! nodes are temporal embedding states. Its longest path bounds the number of
//! sequential steps any parallel execution needs. This crate builds that DAG,
//! measures and schedules it, shortens it by decoupling selected states
//! ("d-nodes"), and trains a small GRU-based embedding model in which each
//! decoupled state is replaced by a free vector tied back to the computed state
//! through a quadratic penalty.

pub mod compgraph;
pub mod depth_sched;
pub mod dnode_select;
pub mod ingest;
pub mod synthgen;
pub mod traincore;

pub use compgraph::{build_dag, build_dag_range, validate_dag, CgNode, CompDag};
pub use depth_sched::{longest_path, wavefront_schedule, DepthReport, Schedule};
pub use dnode_select::{select_cut_by_time, select_exact, select_greedy, DNodeKey, DecoupleResult};
pub use ingest::{ActiveSets, Event, EventStream, Partition, Threshold};
