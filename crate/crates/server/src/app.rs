//! The service's shared state and the operations the HTTP layer exposes.

use std::collections::{BTreeMap, VecDeque};
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use meshwatch_core::allocator::{Allocation, Pool, PoolError, PoolSet};
use meshwatch_core::firmware::{BuildError, BuildService, Builder, StubBuilder};
use meshwatch_core::monitor::{Context, Pipeline, ProcessorCatalog, RunReport, Runner};
use meshwatch_core::registry::{
    ConfigDocument, ConfigIssue, FormSessions, NodeDatabase, Registry, RuleSet, SetConfigError,
};
use meshwatch_core::telemetry::{NodeSource, SourceMode, TelemetryHub};
use meshwatch_core::{stock, Datastream, DeviceDatabase, IpPrefix, NodeId, Timestamp, Transformer};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use crate::config::ServiceConfig;
use crate::persist;

/// Where the service reads the time from. Tests and simulations use a
/// virtual clock they advance themselves.
#[derive(Clone, Debug)]
pub enum Clock {
    System,
    Virtual(Arc<AtomicI64>),
}

impl Clock {
    pub fn virtual_at(start: Timestamp) -> Self {
        Clock::Virtual(Arc::new(AtomicI64::new(start)))
    }

    pub fn now(&self) -> Timestamp {
        match self {
            Clock::System => SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs() as i64),
            Clock::Virtual(t) => t.load(Ordering::SeqCst),
        }
    }

    /// Moves a virtual clock; a no-op on the system clock.
    pub fn set(&self, ts: Timestamp) {
        if let Clock::Virtual(t) = self {
            t.store(ts, Ordering::SeqCst);
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("node {0} does not exist")]
    UnknownNode(NodeId),
    #[error("node {0} already exists")]
    DuplicateNode(NodeId),
    #[error("{message}")]
    Invalid { code: &'static str, message: String, details: Vec<ConfigIssue> },
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error("{0}")]
    Setup(String),
}

impl From<SetConfigError> for AppError {
    fn from(e: SetConfigError) -> Self {
        match e {
            SetConfigError::UnknownNode(n) => AppError::UnknownNode(n),
            SetConfigError::DuplicateNode(n) => AppError::DuplicateNode(n),
            SetConfigError::SchemaViolation(details) => {
                AppError::Invalid { code: "schema-violation", message: "document does not match the schema".into(), details }
            }
            SetConfigError::ValidationFailed(details) => AppError::Invalid {
                code: "validation-failed",
                message: "configuration has outstanding errors".into(),
                details,
            },
            SetConfigError::Registry(e) => AppError::Invalid { code: "invalid-query", message: e.to_string(), details: vec![] },
        }
    }
}

/// Telemetry settings of a new node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TelemetrySetup {
    #[serde(default = "push_mode")]
    pub mode: SourceMode,
    #[serde(default)]
    pub pull_url: Option<String>,
    #[serde(default)]
    pub interval_s: Option<u64>,
}

fn push_mode() -> SourceMode {
    SourceMode::Push
}

impl Default for TelemetrySetup {
    fn default() -> Self {
        Self { mode: SourceMode::Push, pull_url: None, interval_s: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewNode {
    #[serde(default)]
    pub uuid: Option<NodeId>,
    /// Push token; generated when absent.
    #[serde(default)]
    pub token: Option<String>,
    #[serde(default)]
    pub telemetry: Option<TelemetrySetup>,
    #[serde(default)]
    pub config: Option<ConfigDocument>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CreatedNode {
    pub uuid: NodeId,
    pub token: String,
    /// Whether telemetry pushed before registration was adopted.
    pub claimed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeSummary {
    pub uuid: NodeId,
    pub created_at: Timestamp,
    pub name: Option<String>,
    pub device: Option<String>,
    pub online: Option<bool>,
}

pub struct App {
    pub config: ServiceConfig,
    pub clock: Clock,
    pub registry: Arc<Registry>,
    pub db: Arc<NodeDatabase>,
    pub devices: Arc<DeviceDatabase>,
    pub transformer: Arc<Transformer>,
    pub rules: RuleSet,
    pub sessions: FormSessions,
    pub hub: Arc<TelemetryHub>,
    pub streams: Arc<Datastream>,
    pub pools: PoolSet,
    pub builds: BuildService,
    pub runner: Runner,
    pipelines: Vec<Pipeline>,
    runs: Mutex<VecDeque<RunReport>>,
    /// Push tokens by node, kept here so they can be persisted.
    tokens: Mutex<BTreeMap<NodeId, String>>,
}

impl App {
    /// Loads devices, restores persisted state if a data directory holds
    /// any, and assembles every service.
    pub fn new(config: ServiceConfig, clock: Clock) -> Result<Self, AppError> {
        config.validate().map_err(|e| AppError::Setup(e.to_string()))?;
        let devices = Arc::new(DeviceDatabase::new());
        if config.device_dir.is_dir() {
            devices.load_dir(&config.device_dir).map_err(|e| AppError::Setup(e.to_string()))?;
        }
        let models: Vec<String> = devices.all().into_iter().map(|d| d.model_id).collect();
        let registry =
            Arc::new(stock::registry(models.iter().map(String::as_str)).map_err(|e| AppError::Setup(e.to_string()))?);
        let rules = stock::rules(&registry).map_err(|e| AppError::Setup(e.to_string()))?;
        let db = Arc::new(NodeDatabase::new(registry.clone()));
        let hub = Arc::new(TelemetryHub::new(
            Arc::new(stock::dispatcher()),
            Duration::from_millis(config.pull_timeout_ms),
        ));
        let transformer = Arc::new(stock::transformer());
        let builders: Vec<Arc<dyn Builder>> = config
            .builders
            .iter()
            .map(|b| Arc::new(StubBuilder::new(&b.id, b.architectures.iter().cloned())) as Arc<dyn Builder>)
            .collect();
        let builds = BuildService::new(transformer.clone(), builders, config.build_workers);

        let mut streams = Arc::new(Datastream::new());
        let pools = PoolSet::new();
        let mut saved_pools: BTreeMap<String, Pool> = BTreeMap::new();
        let mut tokens = BTreeMap::new();
        if let Some(dir) = &config.data_dir {
            if let Some(state) = persist::load(dir).map_err(|e| AppError::Setup(e.to_string()))? {
                db.import(state.nodes);
                for s in state.sources {
                    tokens.insert(s.node, s.token.clone());
                    hub.add_source(s).map_err(|e| AppError::Setup(e.to_string()))?;
                }
                saved_pools = state.pools.into_iter().map(|p| (p.id.clone(), p)).collect();
                if let Some(s) = state.streams {
                    streams = Arc::new(s);
                }
            }
        }
        for p in &config.pools {
            let pool = match saved_pools.remove(&p.id) {
                Some(saved) if saved.root == p.prefix => saved,
                _ => Pool::new(&p.id, p.prefix, p.holddown_s)?,
            };
            pools.insert(pool)?;
        }

        let catalog = ProcessorCatalog {
            db: db.clone(),
            hub: hub.clone(),
            streams: streams.clone(),
            stale_after_s: config.stale_after_s,
            counter_max: config.counter_max(),
        };
        let pipelines = config
            .pipelines
            .iter()
            .map(|p| catalog.pipeline(&p.name, p.interval_s, &p.processors))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| AppError::Setup(e.to_string()))?;
        Ok(Self {
            runner: Runner::new(config.monitor_workers),
            config,
            clock,
            registry,
            db,
            devices,
            transformer,
            rules,
            sessions: FormSessions::new(),
            hub,
            streams,
            pools,
            builds,
            pipelines,
            runs: Mutex::new(VecDeque::new()),
            tokens: Mutex::new(tokens),
        })
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    pub fn pipelines(&self) -> &[Pipeline] {
        &self.pipelines
    }

    pub fn create_node(&self, req: NewNode) -> Result<CreatedNode, AppError> {
        let uuid = req.uuid.unwrap_or_else(uuid::Uuid::new_v4);
        let setup = req.telemetry.unwrap_or_default();
        let token = req.token.unwrap_or_else(|| uuid::Uuid::new_v4().simple().to_string());
        let source = NodeSource {
            node: uuid,
            mode: setup.mode,
            pull_url: setup.pull_url,
            interval_s: setup.interval_s.unwrap_or(60),
            token: token.clone(),
        };
        source.validate().map_err(|e| AppError::Invalid { code: "invalid-source", message: e.to_string(), details: vec![] })?;
        if let Some(config) = &req.config {
            // Check before creating so that a rejected request leaves nothing behind.
            let issues = config.validate(&self.registry, meshwatch_core::registry::CONFIG_POINT);
            if !issues.is_empty() {
                return Err(SetConfigError::SchemaViolation(issues).into());
            }
            let issues = self.gate(config);
            if !issues.is_empty() {
                return Err(SetConfigError::ValidationFailed(issues).into());
            }
        }
        self.db.create_node(uuid, self.now())?;
        if let Some(config) = req.config {
            self.set_config(&uuid, config)?;
        }
        let claimed = self.hub.claim(source).expect("validated above");
        self.tokens.lock().insert(uuid, token.clone());
        Ok(CreatedNode { uuid, token, claimed })
    }

    pub fn list_nodes(&self, filter: Option<(&str, &str)>) -> Result<Vec<NodeSummary>, AppError> {
        let ids: Vec<NodeId> = match filter {
            None => self.db.node_ids(),
            Some((point, q)) => {
                let predicate = q.parse().map_err(|e: meshwatch_core::registry::QueryParseError| AppError::Invalid {
                    code: "invalid-query",
                    message: e.to_string(),
                    details: vec![],
                })?;
                let found = self.db.query(point, &predicate).map_err(SetConfigError::from)?;
                found.into_iter().collect()
            }
        };
        Ok(ids
            .into_iter()
            .filter_map(|id| {
                let record = self.db.node(&id)?;
                let config = record.documents.get(meshwatch_core::registry::CONFIG_POINT);
                let monitoring = record.documents.get(meshwatch_core::registry::MONITORING_POINT);
                let text = |d: Option<&ConfigDocument>, rid: &str, f: &str| {
                    d.and_then(|d| d.value(rid, f)).and_then(Json::as_str).map(String::from)
                };
                Some(NodeSummary {
                    uuid: id,
                    created_at: record.created_at,
                    name: text(config, "info", "name"),
                    device: text(config, "info", "device"),
                    online: monitoring.and_then(|m| m.value("status", "online")).and_then(Json::as_bool),
                })
            })
            .collect())
    }

    /// Transformation dry run for the device and platform a config selects.
    pub fn gate(&self, config: &ConfigDocument) -> Vec<ConfigIssue> {
        let Some(device) = config.value("info", "device").and_then(Json::as_str) else {
            return Vec::new();
        };
        let platform = config.value("info", "platform").and_then(Json::as_str).unwrap_or("openwrt");
        let descriptor = match self.devices.get(device) {
            Ok(d) => d,
            Err(e) => return vec![ConfigIssue::new("registry", "info.device", e.to_string())],
        };
        match self.transformer.validate(config, &descriptor, platform) {
            Ok(issues) => issues,
            Err(e) => vec![ConfigIssue::new("registry", "info.platform", e.to_string())],
        }
    }

    pub fn set_config(&self, uuid: &NodeId, config: ConfigDocument) -> Result<(), AppError> {
        let gate = |_: NodeId, c: &ConfigDocument| self.gate(c);
        Ok(self.db.set_config(uuid, config, Some(&gate))?)
    }

    /// Applies form defaults for the inputs that changed since the session
    /// last saw the document, then reports what validation would say.
    pub fn form_defaults(
        &self,
        uuid: &NodeId,
        session: &str,
        config: ConfigDocument,
    ) -> Result<(ConfigDocument, Vec<ConfigIssue>), AppError> {
        if !self.db.contains(uuid) {
            return Err(AppError::UnknownNode(*uuid));
        }
        let state = self.sessions.get(*uuid, session);
        let changed = self.rules.changed_inputs(&self.registry, &config, &state);
        let (config, state) = self.rules.apply_defaults(&self.registry, config, &changed, state, self.devices.as_ref());
        self.sessions.put(*uuid, session, state);
        let mut issues = config.validate(&self.registry, meshwatch_core::registry::CONFIG_POINT);
        if issues.is_empty() {
            issues = self.gate(&config);
        }
        Ok((config, issues))
    }

    pub fn build(&self, uuid: &NodeId, platform: &str) -> Result<u64, AppError> {
        let config = self.db.get_config(uuid)?;
        let Some(device) = config.value("info", "device").and_then(Json::as_str) else {
            return Err(AppError::Invalid {
                code: "no-device",
                message: "the node's configuration selects no device".into(),
                details: vec![],
            });
        };
        let descriptor = self.devices.get(device).map_err(|e| AppError::Setup(e.to_string()))?;
        Ok(self.builds.submit(*uuid, config, descriptor, platform)?)
    }

    pub fn allocate(&self, pool: &str, prefix_length: u8, owner: NodeId) -> Result<Allocation, AppError> {
        if !self.db.contains(&owner) {
            return Err(AppError::UnknownNode(owner));
        }
        let pool = self.pools.get(pool)?;
        let allocation = pool.lock().allocate(prefix_length, owner, self.now())?;
        Ok(allocation)
    }

    pub fn free(&self, pool: &str, prefix: IpPrefix) -> Result<(), AppError> {
        let pool = self.pools.get(pool)?;
        pool.lock().free(prefix, self.now())?;
        Ok(())
    }

    /// Runs a pipeline once at the current time and records its report.
    pub fn run_pipeline(&self, name: &str) -> Option<RunReport> {
        let pipeline = self.pipelines.iter().find(|p| p.name == name)?;
        let outcome = self.runner.run(pipeline, Context::default(), self.now());
        let report = outcome.report;
        if let Err(e) = self.streams.downsample_all(self.now()) {
            tracing::warn!("downsampling failed: {e}");
        }
        if let Some(a) = &report.aborted {
            tracing::warn!(pipeline = name, processor = %a.processor, "run aborted: {}", a.message);
        }
        let mut runs = self.runs.lock();
        runs.push_back(report.clone());
        while runs.len() > self.config.run_history.max(1) {
            runs.pop_front();
        }
        Some(report)
    }

    /// Most recent runs first.
    pub fn runs(&self, pipeline: Option<&str>, limit: usize) -> Vec<RunReport> {
        self.runs.lock().iter().rev().filter(|r| pipeline.is_none_or(|p| r.pipeline == p)).take(limit).cloned().collect()
    }

    pub fn sources_with_tokens(&self) -> Vec<NodeSource> {
        let tokens = self.tokens.lock();
        self.hub
            .sources()
            .into_iter()
            .map(|mut s| {
                if let Some(t) = tokens.get(&s.node) {
                    s.token = t.clone();
                }
                s
            })
            .collect()
    }

    /// Writes state to the data directory, if one is configured.
    pub fn save(&self) -> Result<(), AppError> {
        let Some(dir) = &self.config.data_dir else { return Ok(()) };
        persist::save(dir, self).map_err(|e| AppError::Setup(e.to_string()))
    }
}
