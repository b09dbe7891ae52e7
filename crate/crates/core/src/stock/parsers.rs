//! Telemetry parsers for the stock agent modules.

use std::ops::RangeInclusive;

use serde_json::{Map, Value as Json};

use crate::registry::{ConfigDocument, ItemInstance};
use crate::telemetry::ModuleParser;

type Body = Map<String, Json>;

fn int(body: &Body, key: &str) -> Result<Option<i64>, String> {
    match body.get(key) {
        None | Some(Json::Null) => Ok(None),
        Some(v) => v.as_i64().map(Some).ok_or_else(|| format!("`{key}` must be an integer")),
    }
}

fn string(body: &Body, key: &str) -> Result<Option<String>, String> {
    match body.get(key) {
        None | Some(Json::Null) => Ok(None),
        Some(Json::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(format!("`{key}` must be a string")),
    }
}

fn objects<'a>(body: &'a Body, key: &str) -> Result<Vec<&'a Body>, String> {
    match body.get(key) {
        None => Ok(Vec::new()),
        Some(Json::Array(items)) => items
            .iter()
            .map(|i| i.as_object().ok_or_else(|| format!("`{key}` entries must be objects")))
            .collect(),
        Some(_) => Err(format!("`{key}` must be a list")),
    }
}

fn with_opt(inst: ItemInstance, field: &str, value: Option<impl Into<Json>>) -> ItemInstance {
    match value {
        Some(v) => inst.with(field, v),
        None => inst,
    }
}

/// `core.general`: identity, hostname and uptime.
pub struct GeneralParser;

impl ModuleParser for GeneralParser {
    fn module_id(&self) -> &str {
        "core.general"
    }
    fn versions(&self) -> RangeInclusive<u32> {
        1..=4
    }
    fn parse(&self, body: &Body, out: &mut ConfigDocument) -> Result<(), String> {
        let mut inst = ItemInstance::new("GeneralMonitor");
        inst = with_opt(inst, "uuid", string(body, "uuid")?);
        inst = with_opt(inst, "hostname", string(body, "hostname")?);
        inst = with_opt(inst, "uptime", int(body, "uptime")?);
        out.push("general", inst);
        Ok(())
    }
}

/// `core.resources` before version 2 reported flat memory fields.
pub struct ResourcesV1Parser;

impl ModuleParser for ResourcesV1Parser {
    fn module_id(&self) -> &str {
        "core.resources"
    }
    fn versions(&self) -> RangeInclusive<u32> {
        1..=1
    }
    fn parse(&self, body: &Body, out: &mut ConfigDocument) -> Result<(), String> {
        let inst = ItemInstance::new("ResourcesMonitor");
        let inst = with_opt(inst, "memory_total_kib", int(body, "memory_total")?);
        let inst = with_opt(inst, "memory_free_kib", int(body, "memory_free")?);
        out.push("resources", inst);
        Ok(())
    }
}

/// `core.resources` version 2 nests memory under `memory`.
pub struct ResourcesV2Parser;

impl ModuleParser for ResourcesV2Parser {
    fn module_id(&self) -> &str {
        "core.resources"
    }
    fn versions(&self) -> RangeInclusive<u32> {
        2..=2
    }
    fn parse(&self, body: &Body, out: &mut ConfigDocument) -> Result<(), String> {
        let empty = Map::new();
        let memory = match body.get("memory") {
            None => &empty,
            Some(Json::Object(m)) => m,
            Some(_) => return Err("`memory` must be an object".into()),
        };
        let inst = ItemInstance::new("ResourcesMonitor");
        let inst = with_opt(inst, "memory_total_kib", int(memory, "total")?);
        let inst = with_opt(inst, "memory_free_kib", int(memory, "free")?);
        out.push("resources", inst);
        Ok(())
    }
}

/// `core.interfaces`: per-interface byte counters.
pub struct InterfacesParser;

impl ModuleParser for InterfacesParser {
    fn module_id(&self) -> &str {
        "core.interfaces"
    }
    fn versions(&self) -> RangeInclusive<u32> {
        1..=1
    }
    fn parse(&self, body: &Body, out: &mut ConfigDocument) -> Result<(), String> {
        for iface in objects(body, "interfaces")? {
            let name = string(iface, "name")?.ok_or("interface without a name")?;
            let inst = ItemInstance::new("InterfaceMonitor").with("name", name);
            let inst = with_opt(inst, "tx_bytes", int(iface, "tx_bytes")?);
            let inst = with_opt(inst, "rx_bytes", int(iface, "rx_bytes")?);
            out.push("interfaces", inst);
        }
        Ok(())
    }
}

/// `core.routing`: neighbours and their link quality.
pub struct RoutingParser;

impl ModuleParser for RoutingParser {
    fn module_id(&self) -> &str {
        "core.routing"
    }
    fn versions(&self) -> RangeInclusive<u32> {
        1..=1
    }
    fn parse(&self, body: &Body, out: &mut ConfigDocument) -> Result<(), String> {
        for n in objects(body, "neighbors")? {
            let neighbor = string(n, "neighbor")?.ok_or("neighbor without an id")?;
            let lq = match n.get("link_quality") {
                None | Some(Json::Null) => None,
                Some(v) => Some(v.as_f64().ok_or("`link_quality` must be a number")?),
            };
            out.push("routing", with_opt(ItemInstance::new("RoutingNeighbor").with("neighbor", neighbor), "link_quality", lq));
        }
        Ok(())
    }
}

/// `core.vpn`: state of configured tunnels.
pub struct VpnParser;

impl ModuleParser for VpnParser {
    fn module_id(&self) -> &str {
        "core.vpn"
    }
    fn versions(&self) -> RangeInclusive<u32> {
        1..=1
    }
    fn parse(&self, body: &Body, out: &mut ConfigDocument) -> Result<(), String> {
        for link in objects(body, "links")? {
            let server = string(link, "server")?.ok_or("link without a server")?;
            let connected = match link.get("connected") {
                None => false,
                Some(v) => v.as_bool().ok_or("`connected` must be a boolean")?,
            };
            out.push("vpn", ItemInstance::new("VpnLinkMonitor").with("server", server).with("connected", connected));
        }
        Ok(())
    }
}
