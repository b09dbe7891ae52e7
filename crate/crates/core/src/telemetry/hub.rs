//! Telemetry ingestion by push and pull, with last-known-good retention.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use super::{Dispatch, Dispatcher, TelemetryDocument, TelemetryError};
use crate::{NodeId, Timestamp};

const MAX_EVENTS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceMode {
    Push,
    Pull,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSource {
    pub node: NodeId,
    pub mode: SourceMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pull_url: Option<String>,
    pub interval_s: u64,
    /// Shared secret presented as a bearer token on push.
    #[serde(skip_serializing)]
    pub token: String,
}

impl NodeSource {
    pub fn validate(&self) -> Result<(), TelemetryError> {
        if self.mode == SourceMode::Pull && self.pull_url.is_none() {
            return Err(TelemetryError::InvalidSource("pull sources need a pull_url".into()));
        }
        if self.interval_s == 0 {
            return Err(TelemetryError::InvalidSource("interval must be at least one second".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transport {
    Push,
    Pull,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Received {
    pub doc: TelemetryDocument,
    pub received_at: Timestamp,
    pub via: Transport,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TelemetryEventKind {
    Unreachable { message: String },
    UuidMismatch { found: NodeId },
    AuthFailure,
    ParseError { message: String },
    Quarantined,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TelemetryEvent {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<NodeId>,
    pub at: Timestamp,
    #[serde(flatten)]
    pub kind: TelemetryEventKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PushOutcome {
    Accepted,
    /// The uuid is not a known node; the document is held until claimed.
    Quarantined,
}

pub struct TelemetryHub {
    dispatcher: Arc<Dispatcher>,
    agent: ureq::Agent,
    sources: RwLock<BTreeMap<NodeId, NodeSource>>,
    latest: RwLock<HashMap<NodeId, Received>>,
    quarantine: Mutex<BTreeMap<NodeId, Received>>,
    events: Mutex<VecDeque<TelemetryEvent>>,
}

fn tokens_match(expected: &str, presented: &str) -> bool {
    let (a, b) = (expected.as_bytes(), presented.as_bytes());
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

impl TelemetryHub {
    pub fn new(dispatcher: Arc<Dispatcher>, pull_timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(pull_timeout))
            .http_status_as_error(true)
            .build()
            .new_agent();
        Self {
            dispatcher,
            agent,
            sources: RwLock::new(BTreeMap::new()),
            latest: RwLock::new(HashMap::new()),
            quarantine: Mutex::new(BTreeMap::new()),
            events: Mutex::new(VecDeque::new()),
        }
    }

    pub fn dispatcher(&self) -> &Dispatcher {
        &self.dispatcher
    }

    pub fn add_source(&self, source: NodeSource) -> Result<(), TelemetryError> {
        source.validate()?;
        self.sources.write().insert(source.node, source);
        Ok(())
    }

    /// Registers a source and adopts any quarantined document for it.
    pub fn claim(&self, source: NodeSource) -> Result<bool, TelemetryError> {
        let node = source.node;
        self.add_source(source)?;
        let held = self.quarantine.lock().remove(&node);
        Ok(match held {
            Some(r) => {
                self.latest.write().insert(node, r);
                true
            }
            None => false,
        })
    }

    pub fn source(&self, node: &NodeId) -> Option<NodeSource> {
        self.sources.read().get(node).cloned()
    }

    pub fn sources(&self) -> Vec<NodeSource> {
        self.sources.read().values().cloned().collect()
    }

    pub fn quarantined(&self) -> Vec<NodeId> {
        self.quarantine.lock().keys().copied().collect()
    }

    fn event(&self, node: Option<NodeId>, at: Timestamp, kind: TelemetryEventKind) {
        let mut events = self.events.lock();
        if events.len() == MAX_EVENTS {
            events.pop_front();
        }
        events.push_back(TelemetryEvent { node, at, kind });
    }

    pub fn events(&self) -> Vec<TelemetryEvent> {
        self.events.lock().iter().cloned().collect()
    }

    /// Handles a pushed document with its `Authorization` header value.
    pub fn ingest_push(
        &self,
        body: &[u8],
        authorization: Option<&str>,
        now: Timestamp,
    ) -> Result<PushOutcome, TelemetryError> {
        let doc = TelemetryDocument::parse(body).inspect_err(|e| {
            self.event(None, now, TelemetryEventKind::ParseError { message: e.to_string() });
        })?;
        let node = doc.uuid;
        let Some(source) = self.source(&node) else {
            self.quarantine.lock().insert(node, Received { doc, received_at: now, via: Transport::Push });
            self.event(Some(node), now, TelemetryEventKind::Quarantined);
            return Ok(PushOutcome::Quarantined);
        };
        let presented = authorization.and_then(|h| h.strip_prefix("Bearer ")).unwrap_or_default();
        if !tokens_match(&source.token, presented) {
            self.event(Some(node), now, TelemetryEventKind::AuthFailure);
            return Err(TelemetryError::AuthFailure);
        }
        self.latest.write().insert(node, Received { doc, received_at: now, via: Transport::Push });
        Ok(PushOutcome::Accepted)
    }

    /// Accepts a document fetched for `node`, rejecting foreign uuids.
    pub fn accept_pulled(&self, node: NodeId, raw: &[u8], now: Timestamp) -> Result<(), TelemetryError> {
        let doc = TelemetryDocument::parse(raw).inspect_err(|e| {
            self.event(Some(node), now, TelemetryEventKind::ParseError { message: e.to_string() });
        })?;
        if doc.uuid != node {
            self.event(Some(node), now, TelemetryEventKind::UuidMismatch { found: doc.uuid });
            return Err(TelemetryError::UuidMismatch { expected: node, found: doc.uuid });
        }
        self.latest.write().insert(node, Received { doc, received_at: now, via: Transport::Pull });
        Ok(())
    }

    /// Fetches a pull source over HTTP. Failures are recorded as events and
    /// leave the last good document in place.
    pub fn pull(&self, node: NodeId, now: Timestamp) -> Result<(), TelemetryError> {
        let source = self.source(&node).ok_or(TelemetryError::UnknownNode(node))?;
        let url = source
            .pull_url
            .as_deref()
            .ok_or_else(|| TelemetryError::InvalidSource("no pull_url".into()))?;
        let raw = match self.agent.get(url).call() {
            Ok(mut resp) => resp.body_mut().read_to_vec().map_err(|e| TelemetryError::Unreachable(e.to_string())),
            Err(ureq::Error::StatusCode(code)) => Err(TelemetryError::Http(format!("status {code}"))),
            Err(e) => Err(TelemetryError::Unreachable(e.to_string())),
        };
        let raw = raw.inspect_err(|e| {
            self.event(Some(node), now, TelemetryEventKind::Unreachable { message: e.to_string() });
        })?;
        self.accept_pulled(node, &raw, now)
    }

    pub fn latest(&self, node: &NodeId) -> Option<Received> {
        self.latest.read().get(node).cloned()
    }

    /// Monitoring items derived from the latest document of a node.
    pub fn staged(&self, node: &NodeId) -> Option<(Received, Dispatch)> {
        let received = self.latest(node)?;
        let dispatch = self.dispatcher.dispatch(&received.doc);
        Some((received, dispatch))
    }
}
