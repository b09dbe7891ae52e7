//! A fleet of simulated node agents.
//!
//! Each agent keeps an uptime, memory figures and wrapping interface byte
//! counters, and reports them every `report_interval_s` seconds either by
//! pushing to the service or by serving a feed the service pulls. Nodes go
//! up and down at minute boundaries; a truth log records how many were up in
//! each minute and every reboot, so monitoring output can be checked against
//! what actually happened.

use std::collections::HashMap;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::Router;
use meshwatch_core::registry::ItemInstance;
use meshwatch_core::telemetry::{SourceMode, TelemetryHub};
use meshwatch_core::{ConfigDocument, NodeId, Timestamp};
use parking_lot::{Mutex, RwLock};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};

use crate::app::{App, AppError, NewNode, TelemetrySetup};
use crate::config::{counter_max, SimNodeProfile};

/// Where pushing agents send their documents.
pub enum PushSink {
    /// Straight into an in-process hub.
    Hub(Arc<TelemetryHub>),
    /// To a service's `/push/http` endpoint.
    Http { url: String, agent: ureq::Agent },
}

impl PushSink {
    pub fn http(base_url: &str) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(std::time::Duration::from_secs(5)))
            .http_status_as_error(false)
            .build()
            .new_agent();
        PushSink::Http { url: format!("{}/push/http", base_url.trim_end_matches('/')), agent }
    }

    fn send(&self, body: &[u8], token: &str, now: Timestamp) -> Result<(), String> {
        match self {
            PushSink::Hub(hub) => hub.ingest_push(body, Some(&format!("Bearer {token}")), now).map(|_| ()).map_err(|e| e.to_string()),
            PushSink::Http { url, agent } => {
                let resp = agent
                    .post(url)
                    .header("Authorization", &format!("Bearer {token}"))
                    .header("Content-Type", "application/json")
                    .send(body)
                    .map_err(|e| e.to_string())?;
                if resp.status().is_success() {
                    Ok(())
                } else {
                    Err(format!("push answered {}", resp.status()))
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reboot {
    pub node: NodeId,
    pub at: Timestamp,
}

/// What really happened in the simulation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TruthLog {
    /// Minute start to the number of nodes up during that minute.
    pub up_per_minute: Vec<(Timestamp, usize)>,
    pub reboots: Vec<Reboot>,
    pub pushes: u64,
    pub push_failures: u64,
}

impl TruthLog {
    pub fn up_at(&self, minute: Timestamp) -> Option<usize> {
        self.up_per_minute.iter().find(|(m, _)| *m == minute).map(|(_, n)| *n)
    }
}

const INTERFACES: [&str; 2] = ["wlan0", "eth0"];

struct Agent {
    uuid: NodeId,
    hostname: String,
    mode: SourceMode,
    token: String,
    up: bool,
    uptime: u64,
    memory_total: u64,
    memory_free: u64,
    /// `(tx, rx)` per entry of [`INTERFACES`].
    counters: [(u64, u64); 2],
    neighbors: Vec<usize>,
}

struct FeedEntry {
    up: bool,
    body: Option<Vec<u8>>,
}

type Feeds = Arc<RwLock<HashMap<NodeId, FeedEntry>>>;

struct Inner {
    agents: Vec<Agent>,
    rng: ChaCha8Rng,
    truth: TruthLog,
    last_report: Option<Timestamp>,
    last_minute: Option<Timestamp>,
}

pub struct Fleet {
    profile: SimNodeProfile,
    inner: Mutex<Inner>,
    feeds: Feeds,
    sink: PushSink,
    feed_base: String,
}

fn node_uuid(rng: &mut ChaCha8Rng) -> NodeId {
    uuid::Builder::from_random_bytes(rng.random()).into_uuid()
}

impl Fleet {
    /// Creates `profile.count` agents. Pulled agents are reached through
    /// `feed_base`, the base URL where [`Fleet::router`] is served.
    pub fn new(profile: SimNodeProfile, sink: PushSink, feed_base: &str) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
        let count = profile.count;
        let agents = (0..count)
            .map(|i| {
                let memory_total = [16_384u64, 32_768, 65_536][rng.random_range(0..3)];
                let neighbors = if count > 1 {
                    let mut n: Vec<usize> = (0..rng.random_range(1..=3usize.min(count - 1)))
                        .map(|_| rng.random_range(0..count))
                        .filter(|&j| j != i)
                        .collect();
                    n.sort_unstable();
                    n.dedup();
                    n
                } else {
                    Vec::new()
                };
                Agent {
                    uuid: node_uuid(&mut rng),
                    hostname: format!("sim-{i}"),
                    mode: if rng.random_bool(profile.push_fraction) { SourceMode::Push } else { SourceMode::Pull },
                    token: format!("{:032x}", rng.random::<u128>()),
                    up: true,
                    // Between a day and about four months.
                    uptime: rng.random_range(86_400..10_000_000),
                    memory_free: memory_total / 2,
                    memory_total,
                    counters: [(0, 0); 2].map(|_| {
                        let half = counter_max(profile.wrap_width_bits) / 2;
                        (rng.random_range(0..=half), rng.random_range(0..=half))
                    }),
                    neighbors,
                }
            })
            .collect();
        Self {
            profile,
            inner: Mutex::new(Inner { agents, rng, truth: TruthLog::default(), last_report: None, last_minute: None }),
            feeds: Arc::new(RwLock::new(HashMap::new())),
            sink,
            feed_base: feed_base.trim_end_matches('/').to_string(),
        }
    }

    pub fn profile(&self) -> &SimNodeProfile {
        &self.profile
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        self.inner.lock().agents.iter().map(|a| a.uuid).collect()
    }

    pub fn mode_of(&self, node: &NodeId) -> Option<SourceMode> {
        self.inner.lock().agents.iter().find(|a| a.uuid == *node).map(|a| a.mode)
    }

    pub fn feed_url(&self, node: &NodeId) -> String {
        format!("{}/nodes/{node}/nodewatcher/feed", self.feed_base)
    }

    pub fn truth(&self) -> TruthLog {
        self.inner.lock().truth.clone()
    }

    /// Registers every agent with the service, configured for the profile's
    /// device, with its transport and token.
    pub fn register(&self, app: &App) -> Result<(), AppError> {
        let agents: Vec<(NodeId, String, SourceMode, String)> =
            self.inner.lock().agents.iter().map(|a| (a.uuid, a.hostname.clone(), a.mode, a.token.clone())).collect();
        for (uuid, hostname, mode, token) in agents {
            let mut config = ConfigDocument::new();
            config.push(
                "info",
                ItemInstance::new("DeviceInfoConfig").with("name", hostname).with("device", self.profile.device.as_str()),
            );
            let telemetry = TelemetrySetup {
                mode,
                pull_url: (mode == SourceMode::Pull).then(|| self.feed_url(&uuid)),
                interval_s: Some(self.profile.report_interval_s),
            };
            app.create_node(NewNode { uuid: Some(uuid), token: Some(token), telemetry: Some(telemetry), config: Some(config) })?;
        }
        Ok(())
    }

    /// Advances the simulation to `now`. Up/down state is redrawn at each
    /// minute boundary and agents report every `report_interval_s`.
    pub fn step(&self, now: Timestamp) {
        let mut guard = self.inner.lock();
        let inner = &mut *guard;
        let minute = now.div_euclid(60) * 60;
        if inner.last_minute != Some(minute) {
            inner.last_minute = Some(minute);
            for a in &mut inner.agents {
                a.up = !inner.rng.random_bool(self.profile.down_probability);
            }
            let up = inner.agents.iter().filter(|a| a.up).count();
            inner.truth.up_per_minute.push((minute, up));
            let mut feeds = self.feeds.write();
            for a in &inner.agents {
                feeds.entry(a.uuid).or_insert(FeedEntry { up: a.up, body: None }).up = a.up;
            }
        }
        let interval = self.profile.report_interval_s as i64;
        if now.rem_euclid(interval) != 0 || inner.last_report == Some(now) {
            return;
        }
        let elapsed = inner.last_report.map_or(interval, |t| now - t).max(0) as u64;
        inner.last_report = Some(now);

        let max = counter_max(self.profile.wrap_width_bits);
        let modulus = u128::from(max) + 1;
        let step_cap = (max / 2).clamp(1, 1_000_000);
        let mut outgoing = Vec::new();
        for a in &mut inner.agents {
            // A reboot always reports less uptime than the previous report,
            // so the reset is visible to anyone comparing the two.
            if a.uptime > 0 && inner.rng.random_bool(self.profile.reboot_probability) {
                let factor: f64 = inner.rng.random_range(0.05..0.95);
                a.uptime = (a.uptime as f64 * factor).floor() as u64;
                a.counters = [(0, 0); 2];
                inner.truth.reboots.push(Reboot { node: a.uuid, at: now });
            } else {
                a.uptime += elapsed;
                for c in &mut a.counters {
                    for v in [&mut c.0, &mut c.1] {
                        let inc = inner.rng.random_range(0..=step_cap);
                        *v = ((u128::from(*v) + u128::from(inc)) % modulus) as u64;
                    }
                }
            }
            a.memory_free = inner.rng.random_range(a.memory_total / 8..=a.memory_total * 7 / 8);
            if a.up {
                outgoing.push((a.uuid, a.mode, a.token.clone()));
            }
        }
        let docs: HashMap<NodeId, Vec<u8>> = inner
            .agents
            .iter()
            .map(|a| (a.uuid, serde_json::to_vec(&self.document(a, &inner.agents)).expect("serializable")))
            .collect();
        {
            let mut feeds = self.feeds.write();
            for a in &inner.agents {
                let entry = feeds.entry(a.uuid).or_insert(FeedEntry { up: a.up, body: None });
                entry.up = a.up;
                entry.body = docs.get(&a.uuid).cloned();
            }
        }
        let mut failures = 0;
        let mut pushes = 0;
        for (uuid, mode, token) in outgoing {
            if mode != SourceMode::Push {
                continue;
            }
            pushes += 1;
            if let Err(e) = self.sink.send(&docs[&uuid], &token, now) {
                tracing::debug!(node = %uuid, "push failed: {e}");
                failures += 1;
            }
        }
        inner.truth.pushes += pushes;
        inner.truth.push_failures += failures;
    }

    fn document(&self, a: &Agent, all: &[Agent]) -> Json {
        let mut doc = serde_json::Map::new();
        for module in &self.profile.modules {
            let body = match module.as_str() {
                "core.general" => json!({"_meta": {"version": 4}, "uuid": a.uuid, "hostname": a.hostname, "uptime": a.uptime}),
                "core.resources" => json!({"_meta": {"version": 2}, "memory": {"total": a.memory_total, "free": a.memory_free}}),
                "core.interfaces" => json!({
                    "_meta": {"version": 1},
                    "interfaces": INTERFACES.iter().zip(&a.counters)
                        .map(|(name, (tx, rx))| json!({"name": name, "tx_bytes": tx, "rx_bytes": rx}))
                        .collect::<Vec<_>>(),
                }),
                "core.routing" => json!({
                    "_meta": {"version": 1},
                    "neighbors": a.neighbors.iter()
                        .map(|&j| json!({"neighbor": all[j].uuid.to_string(), "link_quality": 0.5 + (j % 5) as f64 / 10.0}))
                        .collect::<Vec<_>>(),
                }),
                "core.vpn" => json!({"_meta": {"version": 1}, "links": [{"server": "vpn.mesh", "connected": a.up}]}),
                _ => continue,
            };
            doc.insert(module.clone(), body);
        }
        Json::Object(doc)
    }

    /// Serves `/nodes/{uuid}/nodewatcher/feed` for pulled agents. Agents
    /// that are down answer 503.
    pub fn router(&self) -> Router {
        Router::new().route("/nodes/{uuid}/nodewatcher/feed", get(feed)).with_state(self.feeds.clone())
    }
}

async fn feed(State(feeds): State<Feeds>, Path(uuid): Path<String>) -> impl IntoResponse {
    let Ok(uuid) = uuid.parse::<NodeId>() else {
        return (StatusCode::NOT_FOUND, Vec::new());
    };
    let feeds = feeds.read();
    match feeds.get(&uuid) {
        None => (StatusCode::NOT_FOUND, Vec::new()),
        Some(FeedEntry { up: false, .. }) | Some(FeedEntry { body: None, .. }) => (StatusCode::SERVICE_UNAVAILABLE, Vec::new()),
        Some(FeedEntry { body: Some(b), .. }) => (StatusCode::OK, b.clone()),
    }
}
