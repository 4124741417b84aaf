//! Event-log parsing, train/valid/test splitting, active-node classification
//! and time-window batching.
//!
//! Every other module consumes the [`EventStream`] produced here. Node IDs
//! inside a stream are dense (`0..n_users`, `0..n_items`); the raw IDs read
//! from disk are kept in an [`IdMap`] so reports can translate back.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("bad header: expected `user_id,item_id,timestamp,label[,feat_0..]`, got `{0}`")]
    Header(String),
    #[error("invalid split fractions {0:?}: must be nonnegative and sum to 1")]
    Fractions((f64, f64, f64)),
    #[error("cannot cut {n_events} events into {n_batches} batches")]
    Batches { n_events: usize, n_batches: usize },
    #[error("event {index} references {partition} {node} outside 0..{bound}")]
    UnknownNode {
        index: usize,
        partition: Partition,
        node: u32,
        bound: usize,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The two node groups of a bipartite interaction stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Partition {
    User,
    Item,
}

impl Partition {
    pub fn other(self) -> Partition {
        match self {
            Partition::User => Partition::Item,
            Partition::Item => Partition::User,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Partition::User => 0,
            Partition::Item => 1,
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Partition::User => f.write_str("user"),
            Partition::Item => f.write_str("item"),
        }
    }
}

/// One interaction `(user, item, time, label)` with optional categorical
/// event features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub user: u32,
    pub item: u32,
    pub time: f64,
    pub label: i64,
    #[serde(default)]
    pub features: Vec<u32>,
}

impl Event {
    pub fn new(user: u32, item: u32, time: f64) -> Self {
        Event {
            user,
            item,
            time,
            label: 0,
            features: Vec::new(),
        }
    }

    pub fn endpoint(&self, partition: Partition) -> u32 {
        match partition {
            Partition::User => self.user,
            Partition::Item => self.item,
        }
    }
}

/// Raw IDs indexed by dense ID.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IdMap {
    pub users: Vec<i64>,
    pub items: Vec<i64>,
}

impl IdMap {
    pub fn identity(n_users: usize, n_items: usize) -> Self {
        IdMap {
            users: (0..n_users as i64).collect(),
            items: (0..n_items as i64).collect(),
        }
    }
}

/// Time-ordered interaction events over a dense bipartite ID space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventStream {
    pub events: Vec<Event>,
    pub n_users: usize,
    pub n_items: usize,
    /// Number of categories per feature column (max observed value + 1).
    pub feature_cardinality: Vec<u32>,
    pub ids: IdMap,
}

impl EventStream {
    /// Builds a stream over identity ID maps. Events are stably sorted by time.
    pub fn new(mut events: Vec<Event>, n_users: usize, n_items: usize) -> Result<Self, IngestError> {
        for (index, e) in events.iter().enumerate() {
            if e.user as usize >= n_users {
                return Err(IngestError::UnknownNode {
                    index,
                    partition: Partition::User,
                    node: e.user,
                    bound: n_users,
                });
            }
            if e.item as usize >= n_items {
                return Err(IngestError::UnknownNode {
                    index,
                    partition: Partition::Item,
                    node: e.item,
                    bound: n_items,
                });
            }
        }
        events.sort_by(|a, b| a.time.total_cmp(&b.time));
        let feature_cardinality = feature_cardinality(&events);
        Ok(EventStream {
            events,
            n_users,
            n_items,
            feature_cardinality,
            ids: IdMap::identity(n_users, n_items),
        })
    }

    pub fn empty(n_users: usize, n_items: usize) -> Self {
        EventStream {
            events: Vec::new(),
            n_users,
            n_items,
            feature_cardinality: Vec::new(),
            ids: IdMap::identity(n_users, n_items),
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn n_nodes(&self, partition: Partition) -> usize {
        match partition {
            Partition::User => self.n_users,
            Partition::Item => self.n_items,
        }
    }

    /// Sub-stream over `range`, sharing this stream's ID space and schema.
    pub fn slice(&self, range: Range<usize>) -> EventStream {
        EventStream {
            events: self.events[range].to_vec(),
            n_users: self.n_users,
            n_items: self.n_items,
            feature_cardinality: self.feature_cardinality.clone(),
            ids: self.ids.clone(),
        }
    }

    /// Concatenation of two consecutive streams over the same ID space.
    pub fn concat(&self, later: &EventStream) -> EventStream {
        let mut out = self.clone();
        out.events.extend(later.events.iter().cloned());
        for (i, &c) in later.feature_cardinality.iter().enumerate() {
            if i < out.feature_cardinality.len() {
                out.feature_cardinality[i] = out.feature_cardinality[i].max(c);
            } else {
                out.feature_cardinality.push(c);
            }
        }
        out
    }

    /// Per-node interaction counts for one partition.
    pub fn degrees(&self, partition: Partition) -> Vec<u64> {
        let mut deg = vec![0u64; self.n_nodes(partition)];
        for e in &self.events {
            deg[e.endpoint(partition) as usize] += 1;
        }
        deg
    }

    /// Timestamp of the last event, if any.
    pub fn last_time(&self) -> Option<f64> {
        self.events.last().map(|e| e.time)
    }
}

fn feature_cardinality(events: &[Event]) -> Vec<u32> {
    let width = events.iter().map(|e| e.features.len()).max().unwrap_or(0);
    let mut card = vec![0u32; width];
    for e in events {
        for (c, &v) in e.features.iter().enumerate() {
            card[c] = card[c].max(v + 1);
        }
    }
    card
}

/// Result of parsing an event log.
#[derive(Clone, Debug)]
pub struct ParsedStream {
    pub stream: EventStream,
    /// Rows whose timestamp was smaller than the previous row's; these were
    /// re-sorted rather than rejected.
    pub out_of_order_rows: usize,
}

/// Parses the event-log CSV (`user_id,item_id,timestamp,label[,feat_0..]`).
pub fn parse_csv<R: Read>(input: R) -> Result<ParsedStream, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let header = reader.headers()?.clone();
    let n_features = check_header(&header)?;

    struct Row {
        user: i64,
        item: i64,
        time: f64,
        label: i64,
        features: Vec<u32>,
    }

    let mut rows = Vec::new();
    let mut out_of_order_rows = 0;
    let mut prev_time = f64::NEG_INFINITY;
    for (i, record) in reader.records().enumerate() {
        // header is line 1
        let line = i + 2;
        let record = record?;
        if record.len() != 4 + n_features {
            return Err(IngestError::Malformed {
                line,
                message: format!("expected {} fields, found {}", 4 + n_features, record.len()),
            });
        }
        let user = parse_field::<i64>(&record[0], line, "user_id")?;
        let item = parse_field::<i64>(&record[1], line, "item_id")?;
        let time = parse_field::<f64>(&record[2], line, "timestamp")?;
        if !time.is_finite() {
            return Err(IngestError::Malformed {
                line,
                message: format!("timestamp `{}` is not finite", &record[2]),
            });
        }
        let label = parse_field::<i64>(&record[3], line, "label")?;
        let features = (0..n_features)
            .map(|k| parse_field::<u32>(&record[4 + k], line, "feature"))
            .collect::<Result<Vec<_>, _>>()?;
        if time < prev_time {
            out_of_order_rows += 1;
        }
        prev_time = prev_time.max(time);
        rows.push(Row {
            user,
            item,
            time,
            label,
            features,
        });
    }

    rows.sort_by(|a, b| a.time.total_cmp(&b.time));

    let mut ids = IdMap::default();
    let mut user_index: HashMap<i64, u32> = HashMap::new();
    let mut item_index: HashMap<i64, u32> = HashMap::new();
    let mut events = Vec::with_capacity(rows.len());
    for row in rows {
        let user = *user_index.entry(row.user).or_insert_with(|| {
            ids.users.push(row.user);
            (ids.users.len() - 1) as u32
        });
        let item = *item_index.entry(row.item).or_insert_with(|| {
            ids.items.push(row.item);
            (ids.items.len() - 1) as u32
        });
        events.push(Event {
            user,
            item,
            time: row.time,
            label: row.label,
            features: row.features,
        });
    }

    let mut card = feature_cardinality(&events);
    card.resize(n_features, 0);
    Ok(ParsedStream {
        stream: EventStream {
            events,
            n_users: ids.users.len(),
            n_items: ids.items.len(),
            feature_cardinality: card,
            ids,
        },
        out_of_order_rows,
    })
}

pub fn parse_csv_path(path: impl AsRef<Path>) -> Result<ParsedStream, IngestError> {
    let file = std::fs::File::open(path)?;
    parse_csv(std::io::BufReader::new(file))
}

fn check_header(header: &csv::StringRecord) -> Result<usize, IngestError> {
    let fields: Vec<&str> = header.iter().collect();
    let fixed = ["user_id", "item_id", "timestamp", "label"];
    if fields.len() < 4 || fields[..4] != fixed {
        return Err(IngestError::Header(fields.join(",")));
    }
    for (k, name) in fields[4..].iter().enumerate() {
        if *name != format!("feat_{k}") {
            return Err(IngestError::Header(fields.join(",")));
        }
    }
    Ok(fields.len() - 4)
}

fn parse_field<T: FromStr>(raw: &str, line: usize, what: &str) -> Result<T, IngestError> {
    raw.parse().map_err(|_| IngestError::Malformed {
        line,
        message: format!("cannot parse {what} `{raw}`"),
    })
}

/// Writes the stream in canonical event-log form using the raw IDs.
pub fn write_csv<W: Write>(stream: &EventStream, out: W) -> Result<(), IngestError> {
    let n_features = stream.feature_cardinality.len();
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    let mut header = vec![
        "user_id".to_string(),
        "item_id".to_string(),
        "timestamp".to_string(),
        "label".to_string(),
    ];
    header.extend((0..n_features).map(|k| format!("feat_{k}")));
    writer.write_record(&header)?;
    for e in &stream.events {
        let user = stream.ids.users.get(e.user as usize).copied().unwrap_or(e.user as i64);
        let item = stream.ids.items.get(e.item as usize).copied().unwrap_or(e.item as i64);
        let mut record = vec![user.to_string(), item.to_string(), e.time.to_string(), e.label.to_string()];
        for k in 0..n_features {
            record.push(e.features.get(k).copied().unwrap_or(0).to_string());
        }
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

/// Contiguous time-ordered split into train / validation / test.
pub fn split_train_valid_test(
    stream: &EventStream,
    fractions: (f64, f64, f64),
) -> Result<(EventStream, EventStream, EventStream), IngestError> {
    let (a, b, c) = fractions;
    let valid = [a, b, c].iter().all(|f| f.is_finite() && *f >= 0.0) && ((a + b + c) - 1.0).abs() <= 1e-9;
    if !valid {
        return Err(IngestError::Fractions(fractions));
    }
    let n = stream.len();
    let train_end = ((a * n as f64).round() as usize).min(n);
    let valid_end = (((a + b) * n as f64).round() as usize).clamp(train_end, n);
    Ok((
        stream.slice(0..train_end),
        stream.slice(train_end..valid_end),
        stream.slice(valid_end..n),
    ))
}

/// Degree threshold `n*`; a node is active iff its degree is strictly above it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Threshold {
    Finite(u64),
    Infinite,
}

impl Threshold {
    pub fn admits(self, degree: u64) -> bool {
        match self {
            Threshold::Finite(n) => degree > n,
            Threshold::Infinite => false,
        }
    }
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Threshold::Finite(n) => write!(f, "{n}"),
            Threshold::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for Threshold {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "inf" | "infinity" | "∞" => Ok(Threshold::Infinite),
            other => other
                .parse::<u64>()
                .map(Threshold::Finite)
                .map_err(|_| format!("threshold must be a nonnegative integer or `inf`, got `{other}`")),
        }
    }
}

/// Nodes represented by static embeddings during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActiveSets {
    pub user_threshold: Threshold,
    pub item_threshold: Threshold,
    active_users: Vec<bool>,
    active_items: Vec<bool>,
}

impl ActiveSets {
    /// No active nodes at all.
    pub fn none(n_users: usize, n_items: usize) -> Self {
        ActiveSets {
            user_threshold: Threshold::Infinite,
            item_threshold: Threshold::Infinite,
            active_users: vec![false; n_users],
            active_items: vec![false; n_items],
        }
    }

    /// Explicit membership, mostly for fixtures.
    pub fn from_members(n_users: usize, n_items: usize, users: &[u32], items: &[u32]) -> Self {
        let mut sets = ActiveSets::none(n_users, n_items);
        for &u in users {
            sets.active_users[u as usize] = true;
        }
        for &i in items {
            sets.active_items[i as usize] = true;
        }
        sets
    }

    pub fn is_active(&self, partition: Partition, node: u32) -> bool {
        let mask = match partition {
            Partition::User => &self.active_users,
            Partition::Item => &self.active_items,
        };
        mask.get(node as usize).copied().unwrap_or(false)
    }

    pub fn members(&self, partition: Partition) -> impl Iterator<Item = u32> + '_ {
        let mask = match partition {
            Partition::User => &self.active_users,
            Partition::Item => &self.active_items,
        };
        mask.iter().enumerate().filter(|(_, &a)| a).map(|(i, _)| i as u32)
    }

    pub fn count(&self, partition: Partition) -> usize {
        self.members(partition).count()
    }

    pub fn len(&self) -> usize {
        self.count(Partition::User) + self.count(Partition::Item)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Marks nodes with strictly more than `n*` interactions in `train` as active.
pub fn classify_active(train: &EventStream, user_threshold: Threshold, item_threshold: Threshold) -> ActiveSets {
    let active_users = train.degrees(Partition::User).into_iter().map(|d| user_threshold.admits(d)).collect();
    let active_items = train.degrees(Partition::Item).into_iter().map(|d| item_threshold.admits(d)).collect();
    ActiveSets {
        user_threshold,
        item_threshold,
        active_users,
        active_items,
    }
}

/// Contiguous, equal-size (±1) time windows over a stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub boundaries: Vec<Range<usize>>,
}

impl BatchPlan {
    pub fn n_batches(&self) -> usize {
        self.boundaries.len()
    }

    /// The whole stream as a single batch.
    pub fn single(n_events: usize) -> Self {
        BatchPlan {
            boundaries: vec![0..n_events],
        }
    }
}

/// Batch `i` covers `floor(i·n/b)..floor((i+1)·n/b)`. With this rule the plan
/// for `2b` batches refines the plan for `b`.
pub fn make_batches(stream: &EventStream, n_batches: usize) -> Result<BatchPlan, IngestError> {
    plan_ranges(stream.len(), n_batches)
}

pub(crate) fn plan_ranges(n_events: usize, n_batches: usize) -> Result<BatchPlan, IngestError> {
    if n_batches == 0 || n_batches > n_events {
        return Err(IngestError::Batches { n_events, n_batches });
    }
    let cut = |i: usize| ((i as u128 * n_events as u128) / n_batches as u128) as usize;
    Ok(BatchPlan {
        boundaries: (0..n_batches).map(|i| cut(i)..cut(i + 1)).collect(),
    })
}
