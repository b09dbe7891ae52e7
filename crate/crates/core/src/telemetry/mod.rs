//! Agent status documents and their version-aware dispatch.
//!
//! A document is a JSON object keyed by module id. Each module body carries
//! a `_meta.version`, and parsers are registered per module for disjoint
//! version ranges so that modules can evolve their schemas independently.

mod hub;

use std::collections::BTreeMap;
use std::ops::RangeInclusive;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value as Json};

use crate::registry::ConfigDocument;
use crate::NodeId;

pub use hub::{NodeSource, PushOutcome, Received, SourceMode, TelemetryEvent, TelemetryEventKind, TelemetryHub, Transport};

pub const GENERAL_MODULE: &str = "core.general";

#[derive(Debug, thiserror::Error, PartialEq, Eq, Clone)]
pub enum TelemetryError {
    #[error("malformed JSON: {0}")]
    MalformedJson(String),
    #[error("module `{0}` has no _meta.version")]
    MissingMeta(String),
    #[error("document has no core.general uuid")]
    MissingUuid,
    #[error("`{0}` is not a valid uuid")]
    InvalidUuid(String),
    #[error("document reports uuid {found} but was fetched for {expected}")]
    UuidMismatch { expected: NodeId, found: NodeId },
    #[error("authentication failed")]
    AuthFailure,
    #[error("node {0} is not registered as a telemetry source")]
    UnknownNode(NodeId),
    #[error("node unreachable: {0}")]
    Unreachable(String),
    #[error("HTTP error: {0}")]
    Http(String),
    #[error("invalid source: {0}")]
    InvalidSource(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleEntry {
    pub version: u32,
    /// Module fields without `_meta`.
    pub body: Map<String, Json>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TelemetryDocument {
    pub uuid: NodeId,
    pub modules: BTreeMap<String, ModuleEntry>,
}

/// Drops commas that directly precede `}` or `]`, outside string literals.
/// Agents in the field emit such commas.
fn strip_trailing_commas(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut in_string = false;
    let mut escaped = false;
    let mut pending_comma: Option<String> = None;
    for c in text.chars() {
        if in_string {
            out.push(c);
            match (escaped, c) {
                (true, _) => escaped = false,
                (false, '\\') => escaped = true,
                (false, '"') => in_string = false,
                _ => {}
            }
            continue;
        }
        if let Some(buf) = pending_comma.as_mut() {
            if c.is_whitespace() {
                buf.push(c);
                continue;
            }
            let buf = pending_comma.take().expect("checked");
            if c == '}' || c == ']' {
                out.push_str(&buf[1..]);
            } else {
                out.push_str(&buf);
            }
        }
        match c {
            ',' => pending_comma = Some(",".into()),
            '"' => {
                in_string = true;
                out.push(c);
            }
            _ => out.push(c),
        }
    }
    if let Some(buf) = pending_comma {
        out.push_str(&buf);
    }
    out
}

impl TelemetryDocument {
    /// Parses a raw agent document. Strict JSON is tried first; on failure
    /// trailing commas are removed and parsing is retried.
    pub fn parse(raw: &[u8]) -> Result<Self, TelemetryError> {
        let text = std::str::from_utf8(raw).map_err(|e| TelemetryError::MalformedJson(e.to_string()))?;
        let value: Json = match serde_json::from_str(text) {
            Ok(v) => v,
            Err(first) => serde_json::from_str(&strip_trailing_commas(text))
                .map_err(|_| TelemetryError::MalformedJson(first.to_string()))?,
        };
        let Json::Object(top) = value else {
            return Err(TelemetryError::MalformedJson("top level must be an object".into()));
        };
        let mut modules = BTreeMap::new();
        for (id, body) in top {
            let Json::Object(mut body) = body else { return Err(TelemetryError::MissingMeta(id)) };
            let version = body
                .remove("_meta")
                .and_then(|m| m.get("version").and_then(Json::as_u64))
                .and_then(|v| u32::try_from(v).ok())
                .ok_or_else(|| TelemetryError::MissingMeta(id.clone()))?;
            modules.insert(id, ModuleEntry { version, body });
        }
        let uuid = modules
            .get(GENERAL_MODULE)
            .and_then(|m| m.body.get("uuid"))
            .ok_or(TelemetryError::MissingUuid)?;
        let uuid = uuid.as_str().ok_or_else(|| TelemetryError::InvalidUuid(uuid.to_string()))?;
        let uuid = NodeId::parse_str(uuid).map_err(|_| TelemetryError::InvalidUuid(uuid.into()))?;
        Ok(Self { uuid, modules })
    }

    /// The wire form: module bodies with `_meta` restored.
    pub fn to_json(&self) -> Json {
        let mut top = Map::new();
        for (id, m) in &self.modules {
            let mut body = Map::new();
            body.insert("_meta".into(), serde_json::json!({ "version": m.version }));
            body.extend(m.body.iter().map(|(k, v)| (k.clone(), v.clone())));
            top.insert(id.clone(), Json::Object(body));
        }
        Json::Object(top)
    }
}

/// Turns one module body of a given version range into monitoring items.
pub trait ModuleParser: Send + Sync {
    fn module_id(&self) -> &str;
    fn versions(&self) -> RangeInclusive<u32>;
    /// Writes into a scratch document that is only merged on success.
    fn parse(&self, body: &Map<String, Json>, out: &mut ConfigDocument) -> Result<(), String>;
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DispatchWarning {
    UnknownModule { module: String },
    UnmatchedVersion { module: String, version: u32 },
    ParseFailed { module: String, message: String },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dispatch {
    /// Staged `node.monitoring` items.
    pub items: ConfigDocument,
    pub warnings: Vec<DispatchWarning>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("parser for `{module}` {new:?} overlaps registered versions {existing:?}")]
pub struct OverlappingVersions {
    pub module: String,
    pub new: RangeInclusive<u32>,
    pub existing: RangeInclusive<u32>,
}

#[derive(Clone, Default)]
pub struct Dispatcher {
    parsers: BTreeMap<String, Vec<Arc<dyn ModuleParser>>>,
}

impl Dispatcher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, parser: Arc<dyn ModuleParser>) -> Result<(), OverlappingVersions> {
        let new = parser.versions();
        let list = self.parsers.entry(parser.module_id().to_string()).or_default();
        if let Some(p) = list.iter().find(|p| {
            let old = p.versions();
            old.start() <= new.end() && new.start() <= old.end()
        }) {
            return Err(OverlappingVersions { module: parser.module_id().into(), new, existing: p.versions() });
        }
        list.push(parser);
        Ok(())
    }

    pub fn parser_for(&self, module: &str, version: u32) -> Option<&Arc<dyn ModuleParser>> {
        self.parsers.get(module)?.iter().find(|p| p.versions().contains(&version))
    }

    /// Routes each module to its parser. Failures are per-module warnings;
    /// modules that parse are staged regardless of the others.
    pub fn dispatch(&self, doc: &TelemetryDocument) -> Dispatch {
        let mut out = Dispatch::default();
        for (id, entry) in &doc.modules {
            let Some(list) = self.parsers.get(id) else {
                out.warnings.push(DispatchWarning::UnknownModule { module: id.clone() });
                continue;
            };
            let Some(parser) = list.iter().find(|p| p.versions().contains(&entry.version)) else {
                out.warnings.push(DispatchWarning::UnmatchedVersion { module: id.clone(), version: entry.version });
                continue;
            };
            let mut scratch = ConfigDocument::new();
            match parser.parse(&entry.body, &mut scratch) {
                Ok(()) => {
                    for (rid, items) in scratch.0 {
                        out.items.instances_mut(&rid).extend(items);
                    }
                }
                Err(message) => out.warnings.push(DispatchWarning::ParseFailed { module: id.clone(), message }),
            }
        }
        out
    }
}
