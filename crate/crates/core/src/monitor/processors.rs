//! Stock processors: load nodes, fetch telemetry, check compliance, commit
//! monitoring state, sample streams and record the topology.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde_json::{json, Value as Json};

use super::{Context, NetworkProcessor, NodeProcessor, NodeView, Pipeline, PipelineError, Processor, ProcessorError, RunInfo, WorkingSet};
use crate::datastream::{tags, Datastream, Graph, GraphEdge, GraphNode, Granularity, ValueType};
use crate::registry::{ConfigDocument, ItemInstance, NodeDatabase, MONITORING_POINT};
use crate::telemetry::{SourceMode, TelemetryHub};
use crate::NodeId;

/// Partition keys written by the stock processors.
pub mod keys {
    pub const ONLINE: &str = "online";
    pub const RECEIVED_AT: &str = "telemetry.received_at";
    pub const VIA: &str = "telemetry.via";
    pub const FETCH_ERROR: &str = "telemetry.error";
    pub const WARNINGS: &str = "telemetry.warnings";
    pub const MONITORING: &str = "monitoring";
    pub const COMPLIANCE: &str = "compliance";
    /// Global key holding the online node count after commit.
    pub const ONLINE_COUNT: &str = "nodes.online";
}

const SAMPLE_GRANULARITY: Granularity = Granularity::Seconds10;

fn monitoring_of(part: &super::Partition) -> Option<ConfigDocument> {
    part.get(keys::MONITORING).and_then(|v| serde_json::from_value(v.clone()).ok())
}

fn is_online(part: Option<&super::Partition>) -> bool {
    part.and_then(|p| p.get(keys::ONLINE)).and_then(Json::as_bool).unwrap_or(false)
}

/// Starts the working set with every registered node.
pub struct NodeLoader {
    pub db: Arc<NodeDatabase>,
}

impl NetworkProcessor for NodeLoader {
    fn name(&self) -> &str {
        "node-loader"
    }
    fn process(&self, working: &mut WorkingSet, _: &mut Context, _: &RunInfo) -> Result<(), ProcessorError> {
        working.extend(self.db.node_ids());
        Ok(())
    }
}

/// Pulls telemetry from pull sources and stages the latest document of
/// every node, marking nodes whose latest report is too old as offline.
pub struct TelemetryFetch {
    pub hub: Arc<TelemetryHub>,
    pub stale_after_s: i64,
}

impl NodeProcessor for TelemetryFetch {
    fn name(&self) -> &str {
        "telemetry-fetch"
    }
    fn process(&self, view: &mut NodeView<'_>, run: &RunInfo) -> Result<(), ProcessorError> {
        let node = view.node;
        if self.hub.source(&node).is_some_and(|s| s.mode == SourceMode::Pull) {
            if let Err(e) = self.hub.pull(node, run.now) {
                view.local.insert(keys::FETCH_ERROR.into(), e.to_string().into());
            }
        }
        let Some((received, dispatch)) = self.hub.staged(&node) else {
            view.local.insert(keys::ONLINE.into(), false.into());
            return Ok(());
        };
        let fresh = run.now - received.received_at < self.stale_after_s;
        view.local.insert(keys::ONLINE.into(), fresh.into());
        view.local.insert(keys::RECEIVED_AT.into(), received.received_at.into());
        view.local.insert(keys::VIA.into(), serde_json::to_value(received.via).expect("serializable"));
        view.local.insert(keys::MONITORING.into(), serde_json::to_value(&dispatch.items).expect("serializable"));
        if !dispatch.warnings.is_empty() {
            view.local.insert(keys::WARNINGS.into(), serde_json::to_value(&dispatch.warnings).expect("serializable"));
        }
        Ok(())
    }
}

/// Compares what a node reports with how it is configured. A VPN link is
/// only expected when one is configured.
pub struct ComplianceValidator {
    pub db: Arc<NodeDatabase>,
}

impl ComplianceValidator {
    pub fn check(config: &ConfigDocument, monitoring: &ConfigDocument) -> Vec<(String, String)> {
        let mut issues = Vec::new();
        for vpn in config.instances("vpn") {
            let Some(server) = vpn.get("server").and_then(Json::as_str) else { continue };
            let up = monitoring.instances("vpn").iter().any(|l| {
                l.get("server").and_then(Json::as_str) == Some(server)
                    && l.get("connected").and_then(Json::as_bool) == Some(true)
            });
            if !up {
                issues.push(("vpn-link-down".into(), format!("configured VPN link to {server} is not connected")));
            }
        }
        let configured = config.value("info", "name").and_then(Json::as_str);
        let reported = monitoring.value("general", "hostname").and_then(Json::as_str);
        if let (Some(c), Some(r)) = (configured, reported) {
            if c != r {
                issues.push(("hostname-mismatch".into(), format!("configured as {c} but reports {r}")));
            }
        }
        issues
    }
}

impl NodeProcessor for ComplianceValidator {
    fn name(&self) -> &str {
        "compliance"
    }
    fn process(&self, view: &mut NodeView<'_>, _: &RunInfo) -> Result<(), ProcessorError> {
        if !is_online(Some(view.local)) {
            return Ok(());
        }
        let Some(monitoring) = monitoring_of(view.local) else { return Ok(()) };
        let config = self.db.get_config(&view.node).map_err(|e| e.to_string())?;
        let issues: Vec<Json> = Self::check(&config, &monitoring)
            .into_iter()
            .map(|(code, message)| json!({"code": code, "message": message}))
            .collect();
        view.local.insert(keys::COMPLIANCE.into(), issues.into());
        Ok(())
    }
}

/// Writes every node's monitoring document and the online count.
pub struct StateCommit {
    pub db: Arc<NodeDatabase>,
}

impl NetworkProcessor for StateCommit {
    fn name(&self) -> &str {
        "state-commit"
    }
    fn process(&self, working: &mut WorkingSet, ctx: &mut Context, _: &RunInfo) -> Result<(), ProcessorError> {
        let mut online_count = 0u64;
        let mut failures = Vec::new();
        for node in working.iter() {
            let part = ctx.per_node.get(node);
            let online = is_online(part);
            online_count += online as u64;
            let mut doc = match part.and_then(monitoring_of) {
                Some(d) => d,
                // Nothing new was staged: keep the last committed items.
                None => self.db.document(node, MONITORING_POINT).unwrap_or_default(),
            };
            let mut status = ItemInstance::new("StatusMonitor").with("online", online);
            if let Some(p) = part {
                if let Some(at) = p.get(keys::RECEIVED_AT) {
                    status = status.with("last_seen", at.clone());
                }
                if let Some(via) = p.get(keys::VIA) {
                    status = status.with("transport", via.clone());
                }
            }
            doc.0.insert("status".into(), vec![status]);
            let compliance = part
                .and_then(|p| p.get(keys::COMPLIANCE))
                .and_then(Json::as_array)
                .map(|issues| {
                    issues
                        .iter()
                        .map(|i| {
                            ItemInstance::new("ComplianceIssue")
                                .with("code", i["code"].clone())
                                .with("message", i["message"].clone())
                        })
                        .collect()
                })
                .unwrap_or_default();
            doc.0.insert("compliance".into(), compliance);
            doc.0.retain(|_, v| !v.is_empty());
            if let Err(e) = self.db.put_document(node, MONITORING_POINT, doc) {
                failures.push(format!("{node}: {e}"));
            }
        }
        ctx.global.insert(keys::ONLINE_COUNT.into(), online_count.into());
        if failures.is_empty() {
            Ok(())
        } else {
            Err(failures.join("; ").into())
        }
    }
}

/// Appends the fleet online count and per-node gauges and counters to the
/// datastream. Per-node samples are taken at the time the telemetry was
/// received, so a document is never sampled twice.
pub struct DatastreamSampler {
    pub streams: Arc<Datastream>,
    /// Largest value interface byte counters take before wrapping.
    pub counter_max: u64,
}

impl DatastreamSampler {
    fn numeric(&self, t: crate::datastream::Tags) -> Result<u64, ProcessorError> {
        self.streams.ensure_stream(t, ValueType::Numeric, SAMPLE_GRANULARITY, None).map_err(|e| e.to_string().into())
    }

    fn sample_node(&self, node: &NodeId, at: i64, monitoring: &ConfigDocument) -> Result<(), ProcessorError> {
        let n = node.to_string();
        let append = |id: u64, v: f64| match self.streams.append(id, at, v) {
            Err(crate::datastream::DatastreamError::OutOfOrderTimestamp { .. }) | Ok(()) => Ok(()),
            Err(e) => Err(ProcessorError(e.to_string())),
        };
        let mut reset_stream = None;
        if let Some(up) = monitoring.value("general", "uptime").and_then(Json::as_f64) {
            let id = self.numeric(tags([("node", &n), ("metric", "uptime")]))?;
            reset_stream = Some(
                self.streams
                    .derive_reset(tags([("node", &n), ("metric", "reset")]), id)
                    .map_err(|e| e.to_string())?,
            );
            append(id, up)?;
        }
        if let Some(free) = monitoring.value("resources", "memory_free_kib").and_then(Json::as_f64) {
            append(self.numeric(tags([("node", &n), ("metric", "memory_free_kib")]))?, free)?;
        }
        if let Some(total) = monitoring.value("resources", "memory_total_kib").and_then(Json::as_f64) {
            append(self.numeric(tags([("node", &n), ("metric", "memory_total_kib")]))?, total)?;
        }
        for iface in monitoring.instances("interfaces") {
            let Some(name) = iface.get("name").and_then(Json::as_str) else { continue };
            for (field, rate) in [("tx_bytes", "tx_rate"), ("rx_bytes", "rx_rate")] {
                let Some(v) = iface.get(field).and_then(Json::as_f64) else { continue };
                let id = self.numeric(tags([("node", &n), ("metric", field), ("interface", name)]))?;
                if let Some(resets) = reset_stream {
                    self.streams
                        .derive_counter(tags([("node", &n), ("metric", rate), ("interface", name)]), id, resets, self.counter_max)
                        .map_err(|e| e.to_string())?;
                }
                append(id, v)?;
            }
        }
        Ok(())
    }
}

impl NetworkProcessor for DatastreamSampler {
    fn name(&self) -> &str {
        "datastream-sampler"
    }
    fn process(&self, working: &mut WorkingSet, ctx: &mut Context, run: &RunInfo) -> Result<(), ProcessorError> {
        let online = match ctx.global.get(keys::ONLINE_COUNT).and_then(Json::as_u64) {
            Some(n) => n,
            None => working.iter().filter(|n| is_online(ctx.per_node.get(n))).count() as u64,
        };
        let fleet = self.numeric(tags([("metric", keys::ONLINE_COUNT)]))?;
        self.streams.append(fleet, run.now, online as f64).map_err(|e| e.to_string())?;
        for node in working.iter() {
            let Some(part) = ctx.per_node.get(node) else { continue };
            let (Some(at), Some(doc)) = (part.get(keys::RECEIVED_AT).and_then(Json::as_i64), monitoring_of(part)) else {
                continue;
            };
            self.sample_node(node, at, &doc)?;
        }
        Ok(())
    }
}

/// Records the mesh graph built from online nodes and their neighbours.
pub struct TopologyIngest {
    pub streams: Arc<Datastream>,
}

impl TopologyIngest {
    pub fn graph(working: &WorkingSet, ctx: &Context) -> Graph {
        let mut graph = Graph::default();
        let mut present = BTreeSet::new();
        for node in working.iter().filter(|n| is_online(ctx.per_node.get(n))) {
            let mut attrs = std::collections::BTreeMap::new();
            let doc = ctx.per_node.get(node).and_then(monitoring_of).unwrap_or_default();
            if let Some(h) = doc.value("general", "hostname") {
                attrs.insert("hostname".to_string(), h.clone());
            }
            present.insert(node.to_string());
            graph.nodes.push(GraphNode { id: node.to_string(), attrs });
        }
        for node in working.iter().filter(|n| is_online(ctx.per_node.get(n))) {
            let doc = ctx.per_node.get(node).and_then(monitoring_of).unwrap_or_default();
            for n in doc.instances("routing") {
                let Some(to) = n.get("neighbor").and_then(Json::as_str) else { continue };
                if !present.contains(to) {
                    continue;
                }
                let mut attrs = std::collections::BTreeMap::new();
                if let Some(lq) = n.get("link_quality") {
                    attrs.insert("link_quality".to_string(), lq.clone());
                }
                graph.edges.push(GraphEdge { from: node.to_string(), to: to.to_string(), attrs });
            }
        }
        graph
    }
}

impl NetworkProcessor for TopologyIngest {
    fn name(&self) -> &str {
        "topology"
    }
    fn process(&self, working: &mut WorkingSet, ctx: &mut Context, run: &RunInfo) -> Result<(), ProcessorError> {
        let id = self
            .streams
            .ensure_stream(tags([("metric", "topology")]), ValueType::Graph, SAMPLE_GRANULARITY, None)
            .map_err(|e| e.to_string())?;
        self.streams.append(id, run.now, Self::graph(working, ctx)).map_err(|e| e.to_string())?;
        Ok(())
    }
}

/// Builds stock processors by name over shared services.
#[derive(Clone)]
pub struct ProcessorCatalog {
    pub db: Arc<NodeDatabase>,
    pub hub: Arc<TelemetryHub>,
    pub streams: Arc<Datastream>,
    pub stale_after_s: i64,
    pub counter_max: u64,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CatalogError {
    #[error("unknown processor `{0}`")]
    UnknownProcessor(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

impl ProcessorCatalog {
    pub const NAMES: [&'static str; 6] =
        ["node-loader", "telemetry-fetch", "compliance", "state-commit", "datastream-sampler", "topology"];

    pub fn processor(&self, name: &str) -> Option<Processor> {
        Some(match name {
            "node-loader" => Processor::Network(Arc::new(NodeLoader { db: self.db.clone() })),
            "telemetry-fetch" => Processor::Node(Arc::new(TelemetryFetch {
                hub: self.hub.clone(),
                stale_after_s: self.stale_after_s,
            })),
            "compliance" => Processor::Node(Arc::new(ComplianceValidator { db: self.db.clone() })),
            "state-commit" => Processor::Network(Arc::new(StateCommit { db: self.db.clone() })),
            "datastream-sampler" => Processor::Network(Arc::new(DatastreamSampler {
                streams: self.streams.clone(),
                counter_max: self.counter_max,
            })),
            "topology" => Processor::Network(Arc::new(TopologyIngest { streams: self.streams.clone() })),
            _ => return None,
        })
    }

    pub fn pipeline(&self, name: &str, interval_s: u64, processors: &[String]) -> Result<Pipeline, CatalogError> {
        let ps = processors
            .iter()
            .map(|p| self.processor(p).ok_or_else(|| CatalogError::UnknownProcessor(p.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Pipeline::new(name, interval_s, ps)?)
    }
}
