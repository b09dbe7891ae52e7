//! Tagged, append-only time-series storage with downsampling.
//!
//! Each stream keeps its raw points at its highest granularity plus one
//! bucket keyspace per coarser ladder granularity. Streams are found through
//! an inverted tag index. Derived streams (reset events, counter rates, sums)
//! are recomputed incrementally as their sources receive points.

mod aggregate;
mod derive;
mod granularity;
mod value;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

pub use aggregate::{AggregateBucket, Moments};
pub use derive::{DerivedSpec, Operator};
pub use granularity::{Granularity, ParseGranularityError};
pub use value::{Datapoint, Graph, GraphEdge, GraphNode, Value, ValueType};

use derive::{OperatorState, SourceView};

use crate::Timestamp;

pub type StreamId = u64;
pub type Tags = BTreeMap<String, String>;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DatastreamError {
    #[error("stream {0} does not exist")]
    UnknownStream(StreamId),
    #[error("streams need at least one tag")]
    EmptyTags,
    #[error("a stream with these tags already exists with a different type, granularity or derivation")]
    TagConflict,
    #[error("timestamp {ts} is not after the last point at {last}")]
    OutOfOrderTimestamp { ts: Timestamp, last: Timestamp },
    #[error("value does not match the stream's type")]
    TypeMismatch,
    #[error("numeric values must be finite")]
    NonFinite,
    #[error("graph edge references unknown node `{0}`")]
    DanglingEdge(String),
    #[error("derived streams do not accept appends")]
    AppendToDerived,
    #[error("granularity {requested} is finer than the stream's {highest}")]
    GranularityFinerThanStream { requested: Granularity, highest: Granularity },
    #[error("sources do not share a highest granularity")]
    GranularityMismatch,
    #[error("invalid derivation: {0}")]
    InvalidDerivation(String),
    #[error("import failed: {0}")]
    Import(String),
}

pub type Result<T, E = DatastreamError> = std::result::Result<T, E>;

/// Public description of a stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamMeta {
    pub id: StreamId,
    pub tags: Tags,
    pub value_type: ValueType,
    pub highest_granularity: Granularity,
    /// Per coarser granularity, the start of the first bucket not yet
    /// downsampled.
    #[serde(default)]
    pub downsample_horizon: BTreeMap<Granularity, Timestamp>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub derived: Option<DerivedSpec>,
}

/// Stored aggregate for one bucket.
#[derive(Clone, Debug, PartialEq)]
enum Aggregate {
    Moments(AggregateBucket),
    Snapshot(Graph),
}

/// Result of a datapoint query.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Series {
    Points(Vec<Datapoint>),
    Buckets(Vec<AggregateBucket>),
}

impl Series {
    pub fn len(&self) -> usize {
        match self {
            Series::Points(p) => p.len(),
            Series::Buckets(b) => b.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

struct StreamData {
    meta: StreamMeta,
    points: BTreeMap<Timestamp, Value>,
    buckets: BTreeMap<Granularity, BTreeMap<Timestamp, Aggregate>>,
    complete_through: Option<Timestamp>,
    op_state: OperatorState,
}

impl StreamData {
    fn view(&self) -> SourceView<'_> {
        SourceView { points: &self.points, complete_through: self.complete_through }
    }
}

type StreamCell = Arc<RwLock<StreamData>>;

#[derive(Default)]
struct Catalog {
    streams: Vec<StreamCell>,
    by_tags: HashMap<Tags, StreamId>,
    tag_index: BTreeMap<(String, String), BTreeSet<StreamId>>,
    dependents: HashMap<StreamId, Vec<StreamId>>,
}

/// The time-series store.
///
/// Streams are individually locked: appends to different streams proceed in
/// parallel. Derived streams always lock themselves before their sources,
/// which keeps lock acquisition acyclic.
#[derive(Default)]
pub struct Datastream {
    catalog: RwLock<Catalog>,
}

impl Datastream {
    pub fn new() -> Self {
        Self::default()
    }

    fn cell(&self, id: StreamId) -> Result<StreamCell> {
        self.catalog
            .read()
            .streams
            .get(id as usize)
            .cloned()
            .ok_or(DatastreamError::UnknownStream(id))
    }

    pub fn len(&self) -> usize {
        self.catalog.read().streams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Returns the stream with exactly `tags`, creating it if needed.
    pub fn ensure_stream(
        &self,
        tags: Tags,
        value_type: ValueType,
        highest_granularity: Granularity,
        derived: Option<DerivedSpec>,
    ) -> Result<StreamId> {
        if tags.is_empty() {
            return Err(DatastreamError::EmptyTags);
        }
        let id = {
            let mut catalog = self.catalog.write();
            if let Some(&id) = catalog.by_tags.get(&tags) {
                let existing = catalog.streams[id as usize].read();
                let m = &existing.meta;
                if m.value_type != value_type
                    || m.highest_granularity != highest_granularity
                    || m.derived != derived
                {
                    return Err(DatastreamError::TagConflict);
                }
                return Ok(id);
            }
            if let Some(spec) = &derived {
                Self::check_derivation(&catalog, spec, value_type, highest_granularity)?;
            }
            let id = catalog.streams.len() as StreamId;
            for (k, v) in &tags {
                catalog.tag_index.entry((k.clone(), v.clone())).or_default().insert(id);
            }
            if let Some(spec) = &derived {
                let mut uniq: Vec<StreamId> = spec.sources.clone();
                uniq.sort_unstable();
                uniq.dedup();
                for src in uniq {
                    catalog.dependents.entry(src).or_default().push(id);
                }
            }
            catalog.by_tags.insert(tags.clone(), id);
            catalog.streams.push(Arc::new(RwLock::new(StreamData {
                meta: StreamMeta {
                    id,
                    tags,
                    value_type,
                    highest_granularity,
                    downsample_horizon: BTreeMap::new(),
                    derived: derived.clone(),
                },
                points: BTreeMap::new(),
                buckets: BTreeMap::new(),
                complete_through: None,
                op_state: OperatorState::default(),
            })));
            id
        };
        if derived.is_some() {
            self.propagate_from(id)?;
        }
        Ok(id)
    }

    fn check_derivation(
        catalog: &Catalog,
        spec: &DerivedSpec,
        value_type: ValueType,
        highest: Granularity,
    ) -> Result<()> {
        let invalid = |m: &str| Err(DatastreamError::InvalidDerivation(m.to_string()));
        if value_type != ValueType::Numeric {
            return invalid("derived streams are numeric");
        }
        let arity_ok = match spec.operator {
            Operator::Reset => spec.sources.len() == 1,
            Operator::CounterDerivative => spec.sources.len() == 2,
            Operator::Sum => spec.sources.len() >= 2,
        };
        if !arity_ok {
            return invalid("wrong number of sources for operator");
        }
        if spec.operator == Operator::CounterDerivative && !spec.max_value.is_some_and(|m| m > 0) {
            return invalid("counter derivative needs a positive max_value");
        }
        for &src in &spec.sources {
            let cell = catalog.streams.get(src as usize).ok_or(DatastreamError::UnknownStream(src))?;
            let src = cell.read();
            if src.meta.value_type != ValueType::Numeric {
                return invalid("sources must be numeric");
            }
            if src.meta.highest_granularity != highest {
                return Err(DatastreamError::GranularityMismatch);
            }
        }
        Ok(())
    }

    /// Event stream marking every decrease of `uptime`.
    pub fn derive_reset(&self, tags: Tags, uptime: StreamId) -> Result<StreamId> {
        let g = self.meta(uptime)?.highest_granularity;
        self.ensure_stream(tags, ValueType::Numeric, g, Some(DerivedSpec::reset(uptime)))
    }

    /// Rate stream over `counter`, nulled wherever `resets` has an event.
    pub fn derive_counter(
        &self,
        tags: Tags,
        counter: StreamId,
        resets: StreamId,
        max_value: u64,
    ) -> Result<StreamId> {
        let g = self.meta(counter)?.highest_granularity;
        self.ensure_stream(
            tags,
            ValueType::Numeric,
            g,
            Some(DerivedSpec::counter_derivative(counter, resets, max_value)),
        )
    }

    pub fn derive_sum(&self, tags: Tags, sources: Vec<StreamId>) -> Result<StreamId> {
        let first = *sources
            .first()
            .ok_or_else(|| DatastreamError::InvalidDerivation("sum needs sources".into()))?;
        let g = self.meta(first)?.highest_granularity;
        self.ensure_stream(tags, ValueType::Numeric, g, Some(DerivedSpec::sum(sources)))
    }

    pub fn meta(&self, id: StreamId) -> Result<StreamMeta> {
        Ok(self.cell(id)?.read().meta.clone())
    }

    /// Streams whose tags include every pair in `query`. An empty query
    /// matches every stream.
    pub fn find(&self, query: &Tags) -> Vec<StreamMeta> {
        let catalog = self.catalog.read();
        let ids: Vec<StreamId> = if query.is_empty() {
            (0..catalog.streams.len() as StreamId).collect()
        } else {
            let mut sets = query
                .iter()
                .map(|(k, v)| catalog.tag_index.get(&(k.clone(), v.clone())));
            let Some(Some(first)) = sets.next() else { return Vec::new() };
            let mut acc: BTreeSet<StreamId> = first.clone();
            for set in sets {
                match set {
                    Some(s) => acc.retain(|id| s.contains(id)),
                    None => return Vec::new(),
                }
            }
            acc.into_iter().collect()
        };
        ids.into_iter()
            .map(|id| catalog.streams[id as usize].read().meta.clone())
            .collect()
    }

    pub fn append(&self, id: StreamId, ts: Timestamp, value: impl Into<Value>) -> Result<()> {
        let value = value.into();
        {
            let cell = self.cell(id)?;
            let mut s = cell.write();
            if s.meta.derived.is_some() {
                return Err(DatastreamError::AppendToDerived);
            }
            match (&value, s.meta.value_type) {
                (Value::Number(n), ValueType::Numeric) if !n.is_finite() => {
                    return Err(DatastreamError::NonFinite)
                }
                (Value::Number(_), ValueType::Numeric) => {}
                (Value::Graph(g), ValueType::Graph) => {
                    if let Some(id) = g.dangling_endpoint() {
                        return Err(DatastreamError::DanglingEdge(id.to_string()));
                    }
                }
                _ => return Err(DatastreamError::TypeMismatch),
            }
            if let Some(last) = s.complete_through {
                if ts <= last {
                    return Err(DatastreamError::OutOfOrderTimestamp { ts, last });
                }
            }
            s.points.insert(ts, value);
            s.complete_through = Some(ts);
        }
        self.propagate_from(id)
    }

    /// Recomputes every stream downstream of `id`, sources before consumers.
    fn propagate_from(&self, id: StreamId) -> Result<()> {
        let mut queue = vec![id];
        let own_derived = self.cell(id)?.read().meta.derived.is_some();
        if own_derived {
            self.advance(id)?;
        }
        while let Some(current) = queue.pop() {
            let deps = self.catalog.read().dependents.get(&current).cloned().unwrap_or_default();
            for dep in deps {
                self.advance(dep)?;
                queue.push(dep);
            }
        }
        Ok(())
    }

    fn advance(&self, id: StreamId) -> Result<()> {
        let cell = self.cell(id)?;
        let mut target = cell.write();
        let Some(spec) = target.meta.derived.clone() else { return Ok(()) };
        let cells = spec.sources.iter().map(|&s| self.cell(s)).collect::<Result<Vec<_>>>()?;
        let guards: Vec<_> = cells.iter().map(|c| c.read()).collect();
        let views: Vec<SourceView<'_>> = guards.iter().map(|g| g.view()).collect();
        let highest = target.meta.highest_granularity;
        let step = match spec.operator {
            Operator::Reset => derive::step_reset(&mut target.op_state, &views[0]),
            Operator::CounterDerivative => derive::step_counter(
                &mut target.op_state,
                &views[0],
                &views[1],
                spec.max_value.unwrap_or(u64::MAX) as f64,
            ),
            Operator::Sum => derive::step_sum(&mut target.op_state, &views, highest),
        };
        drop(views);
        drop(guards);
        for (ts, v) in step.points {
            debug_assert!(target.points.keys().next_back().is_none_or(|&last| ts > last));
            target.points.insert(ts, v);
        }
        target.complete_through = match (target.complete_through, step.complete_through) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        };
        Ok(())
    }

    /// Writes aggregates for every bucket that is complete at `up_to`.
    ///
    /// A bucket `[b, b + w)` is complete once `b + w <= up_to` and no further
    /// point can land in it, i.e. the stream's watermark has reached
    /// `b + w - 1`. Returns the number of buckets written.
    pub fn downsample(&self, id: StreamId, up_to: Timestamp) -> Result<usize> {
        let cell = self.cell(id)?;
        let mut s = cell.write();
        let Some(ct) = s.complete_through else { return Ok(0) };
        let effective = up_to.min(ct.saturating_add(1));
        let highest = s.meta.highest_granularity;
        let mut written = 0;
        for g in highest.coarser() {
            let end = g.bucket_start(effective);
            let start = s.meta.downsample_horizon.get(&g).copied();
            if start.is_some_and(|st| st >= end) {
                continue;
            }
            let lower = start.map_or(std::ops::Bound::Unbounded, std::ops::Bound::Included);
            let mut fresh: BTreeMap<Timestamp, Aggregate> = BTreeMap::new();
            match s.meta.value_type {
                ValueType::Numeric => {
                    let mut current: Option<(Timestamp, Moments)> = None;
                    for (&ts, v) in s.points.range((lower, std::ops::Bound::Excluded(end))) {
                        let Some(n) = v.as_number() else { continue };
                        let b = g.bucket_start(ts);
                        match &mut current {
                            Some((cb, m)) if *cb == b => m.push(n),
                            _ => {
                                if let Some((cb, m)) = current.take() {
                                    fresh.insert(cb, Aggregate::Moments(m.finish(cb).expect("nonempty")));
                                }
                                let mut m = Moments::default();
                                m.push(n);
                                current = Some((b, m));
                            }
                        }
                    }
                    if let Some((cb, m)) = current {
                        fresh.insert(cb, Aggregate::Moments(m.finish(cb).expect("nonempty")));
                    }
                }
                ValueType::Graph => {
                    for (&ts, v) in s.points.range((lower, std::ops::Bound::Excluded(end))) {
                        if let Value::Graph(graph) = v {
                            fresh.insert(g.bucket_start(ts), Aggregate::Snapshot(graph.clone()));
                        }
                    }
                }
            }
            written += fresh.len();
            s.buckets.entry(g).or_default().extend(fresh);
            s.meta.downsample_horizon.insert(g, end);
        }
        Ok(written)
    }

    /// Downsamples every stream; returns the total number of buckets written.
    pub fn downsample_all(&self, up_to: Timestamp) -> Result<usize> {
        let n = self.len() as StreamId;
        (0..n).map(|id| self.downsample(id, up_to)).sum()
    }

    /// Points or buckets with timestamps in `[from, to)`.
    ///
    /// At the stream's highest granularity raw points are returned. Coarser
    /// granularities return moment buckets for numeric streams, and the last
    /// snapshot per bucket (as points) for graph streams.
    pub fn query(
        &self,
        id: StreamId,
        granularity: Granularity,
        from: Timestamp,
        to: Timestamp,
    ) -> Result<Series> {
        let cell = self.cell(id)?;
        let s = cell.read();
        let highest = s.meta.highest_granularity;
        if granularity < highest {
            return Err(DatastreamError::GranularityFinerThanStream { requested: granularity, highest });
        }
        if from >= to {
            return Ok(if granularity == highest || s.meta.value_type == ValueType::Graph {
                Series::Points(Vec::new())
            } else {
                Series::Buckets(Vec::new())
            });
        }
        if granularity == highest {
            return Ok(Series::Points(
                s.points
                    .range(from..to)
                    .map(|(&ts, v)| Datapoint { ts, value: v.clone() })
                    .collect(),
            ));
        }
        let Some(buckets) = s.buckets.get(&granularity) else {
            return Ok(match s.meta.value_type {
                ValueType::Numeric => Series::Buckets(Vec::new()),
                ValueType::Graph => Series::Points(Vec::new()),
            });
        };
        let range = buckets.range(from..to);
        Ok(match s.meta.value_type {
            ValueType::Numeric => Series::Buckets(
                range
                    .filter_map(|(_, a)| match a {
                        Aggregate::Moments(b) => Some(*b),
                        Aggregate::Snapshot(_) => None,
                    })
                    .collect(),
            ),
            ValueType::Graph => Series::Points(
                range
                    .filter_map(|(&ts, a)| match a {
                        Aggregate::Snapshot(g) => Some(Datapoint { ts, value: Value::Graph(g.clone()) }),
                        Aggregate::Moments(_) => None,
                    })
                    .collect(),
            ),
        })
    }

    /// Every raw point of a stream in timestamp order.
    pub fn points(&self, id: StreamId) -> Result<Vec<Datapoint>> {
        let cell = self.cell(id)?;
        let s = cell.read();
        Ok(s.points.iter().map(|(&ts, v)| Datapoint { ts, value: v.clone() }).collect())
    }

    pub fn last_point(&self, id: StreamId) -> Result<Option<Datapoint>> {
        let cell = self.cell(id)?;
        let s = cell.read();
        Ok(s.points.iter().next_back().map(|(&ts, v)| Datapoint { ts, value: v.clone() }))
    }

    /// Writes every stream as line-delimited JSON: one `{"stream": ..}`
    /// record per stream followed by one `{"id", "t", "v"}` record per raw
    /// point. Derived streams are exported without points; importing
    /// recomputes them.
    pub fn export_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let cells: Vec<StreamCell> = self.catalog.read().streams.clone();
        for cell in cells {
            let s = cell.read();
            serde_json::to_writer(&mut out, &ExportRecord::Stream(s.meta.clone()))?;
            out.write_all(b"\n")?;
            if s.meta.derived.is_none() {
                for (&ts, v) in &s.points {
                    let rec = ExportRecord::Point { id: s.meta.id, ts, value: v.clone() };
                    serde_json::to_writer(&mut out, &rec)?;
                    out.write_all(b"\n")?;
                }
            }
        }
        Ok(())
    }

    /// Loads an export produced by [`Datastream::export_jsonl`] into a fresh
    /// store, re-deriving derived streams and re-running downsampling up to
    /// each stream's recorded horizon.
    pub fn import_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let store = Datastream::new();
        let mut remap: HashMap<StreamId, StreamId> = HashMap::new();
        let mut horizons: Vec<(StreamId, Timestamp)> = Vec::new();
        for (lineno, line) in input.lines().enumerate() {
            let line = line.map_err(|e| DatastreamError::Import(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ExportRecord = serde_json::from_str(&line)
                .map_err(|e| DatastreamError::Import(format!("line {}: {e}", lineno + 1)))?;
            match rec {
                ExportRecord::Stream(meta) => {
                    let derived = meta
                        .derived
                        .map(|mut spec| {
                            for src in &mut spec.sources {
                                *src = *remap.get(src).ok_or_else(|| {
                                    DatastreamError::Import(format!("derived stream before source {src}"))
                                })?;
                            }
                            Ok::<_, DatastreamError>(spec)
                        })
                        .transpose()?;
                    let id = store.ensure_stream(meta.tags, meta.value_type, meta.highest_granularity, derived)?;
                    remap.insert(meta.id, id);
                    if let Some(h) = meta.downsample_horizon.values().copied().max() {
                        horizons.push((id, h));
                    }
                }
                ExportRecord::Point { id, ts, value } => {
                    let id = *remap
                        .get(&id)
                        .ok_or_else(|| DatastreamError::Import(format!("point for unknown stream {id}")))?;
                    store.append(id, ts, value)?;
                }
            }
        }
        for (id, h) in horizons {
            store.downsample(id, h)?;
        }
        Ok(store)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ExportRecord {
    Stream(StreamMeta),
    Point {
        id: StreamId,
        #[serde(rename = "t")]
        ts: Timestamp,
        #[serde(rename = "v")]
        value: Value,
    },
}

/// Convenience for building tag maps.
pub fn tags<const N: usize>(pairs: [(&str, &str); N]) -> Tags {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}
