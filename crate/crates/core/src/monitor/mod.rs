//! Monitoring runs.
//!
//! A run threads a working set of nodes and a context through an ordered
//! list of processors. Network processors see and may change both; node
//! processors run once per node in the working set and may only touch that
//! node's partition of the context, reading the global part. Consecutive node
//! processors are fused so that each node runs the whole group on one worker
//! thread, and different nodes run in parallel.

mod processors;
mod schedule;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use indexmap::IndexSet;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use crate::{NodeId, Timestamp};

pub use processors::{
    ComplianceValidator, DatastreamSampler, NodeLoader, ProcessorCatalog, StateCommit, TelemetryFetch,
    TopologyIngest,
};
pub use schedule::{Fire, ScheduleError, Scheduler};

pub type WorkingSet = IndexSet<NodeId>;
pub type Partition = BTreeMap<String, Json>;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Context {
    pub global: BTreeMap<String, Json>,
    pub per_node: BTreeMap<NodeId, Partition>,
}

impl Context {
    pub fn node(&self, node: &NodeId) -> Option<&Partition> {
        self.per_node.get(node)
    }

    fn take_partition(&mut self, node: &NodeId) -> Partition {
        self.per_node.remove(node).unwrap_or_default()
    }

    /// Empty partitions are not stored, so a node that was never written
    /// looks the same whichever way the run was executed.
    fn put_partition(&mut self, node: NodeId, part: Partition) {
        if !part.is_empty() {
            self.per_node.insert(node, part);
        }
    }
}

/// Facts about the run a processor belongs to.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunInfo {
    pub pipeline: String,
    /// Logical time of the run, in Unix seconds.
    pub now: Timestamp,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("{0}")]
pub struct ProcessorError(pub String);

impl From<String> for ProcessorError {
    fn from(s: String) -> Self {
        Self(s)
    }
}

impl From<&str> for ProcessorError {
    fn from(s: &str) -> Self {
        Self(s.into())
    }
}

pub trait NetworkProcessor: Send + Sync {
    fn name(&self) -> &str;
    fn process(&self, working: &mut WorkingSet, ctx: &mut Context, run: &RunInfo) -> Result<(), ProcessorError>;
}

/// Per-node view handed to node processors.
pub struct NodeView<'a> {
    pub node: NodeId,
    pub global: &'a BTreeMap<String, Json>,
    pub local: &'a mut Partition,
}

pub trait NodeProcessor: Send + Sync {
    fn name(&self) -> &str;
    fn process(&self, view: &mut NodeView<'_>, run: &RunInfo) -> Result<(), ProcessorError>;
}

#[derive(Clone)]
pub enum Processor {
    Network(Arc<dyn NetworkProcessor>),
    Node(Arc<dyn NodeProcessor>),
}

impl Processor {
    pub fn name(&self) -> &str {
        match self {
            Processor::Network(p) => p.name(),
            Processor::Node(p) => p.name(),
        }
    }

    pub fn kind(&self) -> ProcessorKind {
        match self {
            Processor::Network(_) => ProcessorKind::Network,
            Processor::Node(_) => ProcessorKind::Node,
        }
    }
}

impl std::fmt::Debug for Processor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}({})", self.kind(), self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProcessorKind {
    Network,
    Node,
}

#[derive(Clone, Debug)]
pub struct Pipeline {
    pub name: String,
    pub interval_s: u64,
    pub processors: Vec<Processor>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PipelineError {
    #[error("pipeline name must not be empty")]
    EmptyName,
    #[error("pipeline `{0}` needs an interval of at least one second")]
    ZeroInterval(String),
}

impl Pipeline {
    pub fn new(name: &str, interval_s: u64, processors: Vec<Processor>) -> Result<Self, PipelineError> {
        if name.is_empty() {
            return Err(PipelineError::EmptyName);
        }
        if interval_s == 0 {
            return Err(PipelineError::ZeroInterval(name.into()));
        }
        Ok(Self { name: name.into(), interval_s, processors })
    }
}

/// One step of an execution plan, holding processor indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Stage {
    Network(usize),
    NodeGroup(Vec<usize>),
}

/// Splits a pipeline into network barriers and maximal node groups.
pub fn plan(processors: &[Processor]) -> Vec<Stage> {
    let mut stages = Vec::new();
    for (i, p) in processors.iter().enumerate() {
        match p {
            Processor::Network(_) => stages.push(Stage::Network(i)),
            Processor::Node(_) => match stages.last_mut() {
                Some(Stage::NodeGroup(group)) => group.push(i),
                _ => stages.push(Stage::NodeGroup(vec![i])),
            },
        }
    }
    stages
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeFailure {
    pub node: NodeId,
    pub processor: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageReport {
    pub kind: ProcessorKind,
    pub processors: Vec<String>,
    pub duration_us: u64,
    pub working_set_before: usize,
    pub working_set_after: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Abort {
    pub processor: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunReport {
    pub pipeline: String,
    /// Logical start time of the run.
    pub started_at: Timestamp,
    /// Logical time plus the wall-clock duration, rounded up to a second.
    pub finished_at: Timestamp,
    pub duration_us: u64,
    pub stages: Vec<StageReport>,
    pub node_failures: Vec<NodeFailure>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aborted: Option<Abort>,
}

impl RunReport {
    pub fn succeeded(&self) -> bool {
        self.aborted.is_none() && self.node_failures.is_empty()
    }
}

pub struct RunOutcome {
    pub working: WorkingSet,
    pub context: Context,
    pub report: RunReport,
}

/// Runs pipelines on a bounded worker pool.
pub struct Runner {
    pool: rayon::ThreadPool,
}

impl Runner {
    pub fn new(workers: usize) -> Self {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .thread_name(|i| format!("monitor-{i}"))
            .build()
            .expect("worker pool");
        Self { pool }
    }

    pub fn workers(&self) -> usize {
        self.pool.current_num_threads()
    }

    pub fn run(&self, pipeline: &Pipeline, initial: Context, now: Timestamp) -> RunOutcome {
        let info = RunInfo { pipeline: pipeline.name.clone(), now };
        let started = Instant::now();
        let mut working = WorkingSet::new();
        let mut ctx = initial;
        let mut stages = Vec::new();
        let mut node_failures = Vec::new();
        let mut aborted = None;

        for stage in plan(&pipeline.processors) {
            let stage_start = Instant::now();
            let before = working.len();
            let (kind, names) = match &stage {
                Stage::Network(i) => {
                    let Processor::Network(p) = &pipeline.processors[*i] else { unreachable!() };
                    if let Err(e) = p.process(&mut working, &mut ctx, &info) {
                        aborted = Some(Abort { processor: p.name().into(), message: e.0 });
                    }
                    (ProcessorKind::Network, vec![p.name().to_string()])
                }
                Stage::NodeGroup(idx) => {
                    let group: Vec<&Arc<dyn NodeProcessor>> = idx
                        .iter()
                        .map(|i| match &pipeline.processors[*i] {
                            Processor::Node(p) => p,
                            Processor::Network(_) => unreachable!(),
                        })
                        .collect();
                    let snapshot = cfg!(debug_assertions).then(|| working.clone());
                    node_failures.extend(self.run_group(&group, &working, &mut ctx, &info));
                    if let Some(s) = snapshot {
                        debug_assert!(s == working && s.iter().eq(working.iter()));
                    }
                    (ProcessorKind::Node, group.iter().map(|p| p.name().to_string()).collect())
                }
            };
            stages.push(StageReport {
                kind,
                processors: names,
                duration_us: stage_start.elapsed().as_micros() as u64,
                working_set_before: before,
                working_set_after: working.len(),
            });
            if aborted.is_some() {
                break;
            }
        }

        let elapsed = started.elapsed();
        let report = RunReport {
            pipeline: pipeline.name.clone(),
            started_at: now,
            finished_at: now + elapsed.as_secs_f64().ceil() as i64,
            duration_us: elapsed.as_micros() as u64,
            stages,
            node_failures,
            aborted,
        };
        RunOutcome { working, context: ctx, report }
    }

    fn run_group(
        &self,
        group: &[&Arc<dyn NodeProcessor>],
        working: &WorkingSet,
        ctx: &mut Context,
        info: &RunInfo,
    ) -> Vec<NodeFailure> {
        let mut parts: Vec<(NodeId, Partition, Vec<NodeFailure>)> =
            working.iter().map(|n| (*n, ctx.take_partition(n), Vec::new())).collect();
        let global = &ctx.global;
        self.pool.install(|| {
            parts.par_iter_mut().for_each(|(node, part, failures)| {
                for p in group {
                    failures.extend(run_node(p.as_ref(), *node, global, part, info));
                }
            });
        });
        let mut failures = Vec::new();
        for (node, part, f) in parts {
            ctx.put_partition(node, part);
            failures.extend(f);
        }
        failures
    }
}

/// Runs one node processor on one node, restoring the partition if it fails.
fn run_node(
    p: &dyn NodeProcessor,
    node: NodeId,
    global: &BTreeMap<String, Json>,
    part: &mut Partition,
    info: &RunInfo,
) -> Option<NodeFailure> {
    let backup = part.clone();
    let mut view = NodeView { node, global, local: part };
    match p.process(&mut view, info) {
        Ok(()) => None,
        Err(e) => {
            *part = backup;
            Some(NodeFailure { node, processor: p.name().into(), message: e.0 })
        }
    }
}

/// Straight-line interpreter of a run: processors in order, nodes one at a
/// time, no fusion and no threads. Used as the reference the parallel runner
/// is checked against.
pub fn run_sequential(pipeline: &Pipeline, initial: Context, now: Timestamp) -> (WorkingSet, Context, Vec<NodeFailure>) {
    let info = RunInfo { pipeline: pipeline.name.clone(), now };
    let mut working = WorkingSet::new();
    let mut ctx = initial;
    let mut failures = Vec::new();
    for p in &pipeline.processors {
        match p {
            Processor::Network(p) => {
                if p.process(&mut working, &mut ctx, &info).is_err() {
                    break;
                }
            }
            Processor::Node(p) => {
                for n in &working {
                    let mut part = ctx.take_partition(n);
                    failures.extend(run_node(p.as_ref(), *n, &ctx.global, &mut part, &info));
                    ctx.put_partition(*n, part);
                }
            }
        }
    }
    // The runner reports failures node by node within a group; match that.
    failures.sort_by_key(|f| working.get_index_of(&f.node));
    (working, ctx, failures)
}
