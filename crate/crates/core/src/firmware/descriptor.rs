//! Declarative device descriptors with single inheritance.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::registry::DeviceCapabilities;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Radio {
    pub id: String,
    pub name: String,
    /// IEEE 802.11 variants such as `802.11a`, `802.11n`.
    #[serde(default)]
    pub protocols: BTreeSet<String>,
    /// Capabilities such as `multiple-vifs`.
    #[serde(default)]
    pub features: BTreeSet<String>,
    #[serde(default)]
    pub antenna_connectors: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vlan {
    pub tag: u16,
    /// Switch port numbers in the VLAN; the CPU port is added tagged.
    pub ports: Vec<u32>,
}

fn default_switch_interface() -> String {
    "eth0".into()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Switch {
    pub id: String,
    /// Network device the CPU port is attached to.
    #[serde(default = "default_switch_interface")]
    pub interface: String,
    pub cpu_port: u32,
    #[serde(default)]
    pub vlans: Vec<Vlan>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EthernetPort {
    /// Logical name such as `lan0` or `wan0`.
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub switch: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vlan_tag: Option<u16>,
    /// Network device for ports not behind a switch; defaults to the id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub netdev: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Antenna {
    pub id: String,
    pub connector: String,
    pub gain_dbi: f64,
    pub polarization: String,
}

/// A descriptor as written in a device file. Every field except the model
/// id may be left out and is then taken from the parent.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub model_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub display_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manufacturer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub architecture: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radios: Option<Vec<Radio>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub switches: Option<Vec<Switch>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ethernet_ports: Option<Vec<EthernetPort>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub antennas: Option<Vec<Antenna>>,
    /// Platform name to platform-specific identifiers (e.g. the OpenWrt
    /// name of a radio), keyed by logical id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub platforms: Option<BTreeMap<String, BTreeMap<String, String>>>,
}

/// A fully resolved descriptor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceDescriptor {
    pub model_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    pub display_name: String,
    pub manufacturer: String,
    pub url: String,
    pub architecture: String,
    pub radios: Vec<Radio>,
    pub switches: Vec<Switch>,
    pub ethernet_ports: Vec<EthernetPort>,
    pub antennas: Vec<Antenna>,
    pub platforms: BTreeMap<String, BTreeMap<String, String>>,
}

impl DeviceDescriptor {
    pub fn radio(&self, id: &str) -> Option<&Radio> {
        self.radios.iter().find(|r| r.id == id)
    }

    pub fn port(&self, id: &str) -> Option<&EthernetPort> {
        self.ethernet_ports.iter().find(|p| p.id == id)
    }

    pub fn switch(&self, id: &str) -> Option<&Switch> {
        self.switches.iter().find(|s| s.id == id)
    }

    /// Platform-specific name for a logical id, falling back to the id.
    pub fn platform_name<'a>(&'a self, platform: &str, id: &'a str) -> &'a str {
        self.platforms.get(platform).and_then(|m| m.get(id)).map_or(id, String::as_str)
    }

    /// The network device a logical Ethernet port maps to: `<cpu netdev>.<vlan>`
    /// behind a switch, the port's own netdev otherwise.
    pub fn port_netdev(&self, port: &EthernetPort) -> String {
        match (&port.switch, port.vlan_tag) {
            (Some(sw), Some(tag)) => {
                let iface = self.switch(sw).map_or("eth0", |s| s.interface.as_str());
                format!("{iface}.{tag}")
            }
            _ => port.netdev.clone().unwrap_or_else(|| port.id.clone()),
        }
    }

    fn check_references(&self) -> Result<(), DeviceError> {
        let unresolved = |what: String| DeviceError::UnresolvedReference { model_id: self.model_id.clone(), what };
        let mut ids = BTreeSet::new();
        for r in &self.radios {
            if !ids.insert(&r.id) {
                return Err(unresolved(format!("radio `{}` declared twice", r.id)));
            }
        }
        let mut ids = BTreeSet::new();
        for p in &self.ethernet_ports {
            if !ids.insert(&p.id) {
                return Err(unresolved(format!("port `{}` declared twice", p.id)));
            }
            if let Some(sw) = &p.switch {
                let switch = self.switch(sw).ok_or_else(|| unresolved(format!("port `{}` names switch `{sw}`", p.id)))?;
                if let Some(tag) = p.vlan_tag {
                    if !switch.vlans.iter().any(|v| v.tag == tag) {
                        return Err(unresolved(format!("port `{}` names vlan {tag} of `{sw}`", p.id)));
                    }
                }
            }
        }
        for a in &self.antennas {
            if !self.radios.iter().any(|r| r.antenna_connectors.contains(&a.connector)) {
                return Err(unresolved(format!("antenna `{}` names connector `{}`", a.id, a.connector)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum DeviceError {
    #[error("device `{0}` is already registered")]
    DuplicateModelId(String),
    #[error("device `{model_id}`: unresolved reference: {what}")]
    UnresolvedReference { model_id: String, what: String },
    #[error("device inheritance cycle through `{0}`")]
    CyclicInheritance(String),
    #[error("device `{0}` does not exist")]
    UnknownDevice(String),
    #[error("cannot read devices: {0}")]
    Load(String),
}

/// Folds a child spec over its resolved parent (or over nothing for roots).
pub fn resolve(spec: &DeviceSpec, parent: Option<&DeviceDescriptor>) -> Result<DeviceDescriptor, DeviceError> {
    let pick = |own: &Option<String>, inherited: Option<&String>| own.clone().or_else(|| inherited.cloned());
    let architecture = pick(&spec.architecture, parent.map(|p| &p.architecture)).ok_or_else(|| {
        DeviceError::UnresolvedReference { model_id: spec.model_id.clone(), what: "no architecture".into() }
    })?;
    let d = DeviceDescriptor {
        model_id: spec.model_id.clone(),
        parent: spec.parent.clone(),
        display_name: pick(&spec.display_name, parent.map(|p| &p.display_name)).unwrap_or_else(|| spec.model_id.clone()),
        manufacturer: pick(&spec.manufacturer, parent.map(|p| &p.manufacturer)).unwrap_or_default(),
        url: pick(&spec.url, parent.map(|p| &p.url)).unwrap_or_default(),
        architecture,
        radios: spec.radios.clone().or_else(|| parent.map(|p| p.radios.clone())).unwrap_or_default(),
        switches: spec.switches.clone().or_else(|| parent.map(|p| p.switches.clone())).unwrap_or_default(),
        ethernet_ports: spec
            .ethernet_ports
            .clone()
            .or_else(|| parent.map(|p| p.ethernet_ports.clone()))
            .unwrap_or_default(),
        antennas: spec.antennas.clone().or_else(|| parent.map(|p| p.antennas.clone())).unwrap_or_default(),
        platforms: spec.platforms.clone().or_else(|| parent.map(|p| p.platforms.clone())).unwrap_or_default(),
    };
    d.check_references()?;
    Ok(d)
}

/// Reads one descriptor file holding a single spec or a list of them.
pub fn read_specs(path: &Path) -> Result<Vec<DeviceSpec>, DeviceError> {
    let load = |e: String| DeviceError::Load(format!("{}: {e}", path.display()));
    let text = std::fs::read_to_string(path).map_err(|e| load(e.to_string()))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| load(e.to_string()))?;
    let parsed = if value.is_array() {
        serde_json::from_value::<Vec<DeviceSpec>>(value)
    } else {
        serde_json::from_value::<DeviceSpec>(value).map(|s| vec![s])
    };
    parsed.map_err(|e| load(e.to_string()))
}

/// Registered devices, stored resolved.
#[derive(Default)]
pub struct DeviceDatabase {
    devices: RwLock<BTreeMap<String, DeviceDescriptor>>,
}

impl DeviceDatabase {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, spec: DeviceSpec) -> Result<String, DeviceError> {
        let mut devices = self.devices.write();
        if devices.contains_key(&spec.model_id) {
            return Err(DeviceError::DuplicateModelId(spec.model_id));
        }
        if spec.parent.as_ref() == Some(&spec.model_id) {
            return Err(DeviceError::CyclicInheritance(spec.model_id));
        }
        let parent = match &spec.parent {
            Some(p) => Some(devices.get(p).ok_or_else(|| DeviceError::UnresolvedReference {
                model_id: spec.model_id.clone(),
                what: format!("parent `{p}`"),
            })?),
            None => None,
        };
        let resolved = resolve(&spec, parent)?;
        devices.insert(spec.model_id.clone(), resolved);
        Ok(spec.model_id)
    }

    /// Registers a batch in dependency order, so parents may appear after
    /// their children.
    pub fn register_all(&self, specs: Vec<DeviceSpec>) -> Result<Vec<String>, DeviceError> {
        let mut pending: BTreeMap<String, DeviceSpec> = BTreeMap::new();
        for s in specs {
            if pending.contains_key(&s.model_id) || self.contains(&s.model_id) {
                return Err(DeviceError::DuplicateModelId(s.model_id));
            }
            pending.insert(s.model_id.clone(), s);
        }
        let mut order = Vec::new();
        while !pending.is_empty() {
            let ready: Vec<String> = pending
                .values()
                .filter(|s| s.parent.as_ref().is_none_or(|p| !pending.contains_key(p)))
                .map(|s| s.model_id.clone())
                .collect();
            if ready.is_empty() {
                let stuck = pending.keys().next().expect("non-empty").clone();
                return Err(DeviceError::CyclicInheritance(stuck));
            }
            for id in ready {
                let spec = pending.remove(&id).expect("listed above");
                order.push(self.register(spec)?);
            }
        }
        Ok(order)
    }

    /// Loads every `*.json` file in a directory; each holds one spec or a list.
    pub fn load_dir(&self, dir: &Path) -> Result<Vec<String>, DeviceError> {
        let mut files: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| DeviceError::Load(format!("{}: {e}", dir.display())))?
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        let mut specs = Vec::new();
        for f in files {
            specs.extend(read_specs(&f)?);
        }
        self.register_all(specs)
    }

    pub fn contains(&self, model_id: &str) -> bool {
        self.devices.read().contains_key(model_id)
    }

    pub fn get(&self, model_id: &str) -> Result<DeviceDescriptor, DeviceError> {
        self.devices.read().get(model_id).cloned().ok_or_else(|| DeviceError::UnknownDevice(model_id.into()))
    }

    pub fn all(&self) -> Vec<DeviceDescriptor> {
        self.devices.read().values().cloned().collect()
    }
}

impl DeviceCapabilities for DeviceDatabase {
    fn radio_has_feature(&self, device: &str, feature: &str) -> bool {
        self.devices.read().get(device).is_some_and(|d| d.radios.iter().any(|r| r.features.contains(feature)))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn wr741() -> DeviceSpec {
        serde_json::from_value(serde_json::json!({
            "model_id": "tp-wr741ndv1",
            "display_name": "WR741ND v1",
            "manufacturer": "TP-Link",
            "url": "https://www.tp-link.com",
            "architecture": "ar71xx",
            "radios": [{"id": "wifi0", "name": "Integrated", "protocols": ["802.11b", "802.11g", "802.11n"],
                        "features": ["multiple-vifs"], "antenna_connectors": ["a1"]}],
            "switches": [{"id": "sw0", "cpu_port": 0, "vlans": [
                {"tag": 1, "ports": [1, 2, 3, 4]}, {"tag": 2, "ports": [5]}]}],
            "ethernet_ports": [
                {"id": "lan0", "switch": "sw0", "vlan_tag": 1},
                {"id": "wan0", "switch": "sw0", "vlan_tag": 2}],
            "antennas": [{"id": "internal", "connector": "a1", "gain_dbi": 3.0, "polarization": "vertical"}]
        }))
        .unwrap()
    }

    #[test]
    fn base_round_trip() {
        let db = DeviceDatabase::new();
        db.register(wr741()).unwrap();
        let d = db.get("tp-wr741ndv1").unwrap();
        assert_eq!(d.architecture, "ar71xx");
        assert_eq!(d.ethernet_ports.len(), 2);
        assert_eq!(d.port_netdev(d.port("wan0").unwrap()), "eth0.2");
    }

    #[test]
    fn empty_child_equals_parent() {
        let db = DeviceDatabase::new();
        db.register(wr741()).unwrap();
        db.register(DeviceSpec { model_id: "v2".into(), parent: Some("tp-wr741ndv1".into()), ..Default::default() })
            .unwrap();
        let mut child = db.get("v2").unwrap();
        let parent = db.get("tp-wr741ndv1").unwrap();
        child.model_id = parent.model_id.clone();
        child.parent = None;
        assert_eq!(child, parent);
    }

    #[test]
    fn child_overrides_lists_wholesale() {
        let db = DeviceDatabase::new();
        db.register(wr741()).unwrap();
        let radios = vec![Radio {
            id: "wifi1".into(),
            name: "5 GHz".into(),
            protocols: ["802.11a".to_string()].into(),
            features: BTreeSet::new(),
            antenna_connectors: vec!["a1".into()],
        }];
        db.register(DeviceSpec {
            model_id: "five".into(),
            parent: Some("tp-wr741ndv1".into()),
            radios: Some(radios.clone()),
            ..Default::default()
        })
        .unwrap();
        let d = db.get("five").unwrap();
        assert_eq!(d.radios, radios);
        assert_eq!(d.switches, db.get("tp-wr741ndv1").unwrap().switches);
    }

    #[test]
    fn registration_errors() {
        let db = DeviceDatabase::new();
        db.register(wr741()).unwrap();
        assert_eq!(db.register(wr741()).unwrap_err(), DeviceError::DuplicateModelId("tp-wr741ndv1".into()));
        let orphan = DeviceSpec { model_id: "o".into(), parent: Some("missing".into()), ..Default::default() };
        assert!(matches!(db.register(orphan), Err(DeviceError::UnresolvedReference { .. })));
        let mut bad = wr741();
        bad.model_id = "bad".into();
        bad.ethernet_ports.as_mut().unwrap()[0].switch = Some("sw9".into());
        assert!(matches!(db.register(bad), Err(DeviceError::UnresolvedReference { .. })));
        let selfish = DeviceSpec { model_id: "s".into(), parent: Some("s".into()), ..Default::default() };
        assert_eq!(db.register(selfish).unwrap_err(), DeviceError::CyclicInheritance("s".into()));
    }

    #[test]
    fn batch_cycles_detected() {
        let db = DeviceDatabase::new();
        let a = DeviceSpec { model_id: "a".into(), parent: Some("b".into()), ..Default::default() };
        let b = DeviceSpec { model_id: "b".into(), parent: Some("a".into()), ..Default::default() };
        assert!(matches!(db.register_all(vec![a, b]), Err(DeviceError::CyclicInheritance(_))));
    }

    #[test]
    fn batch_orders_parents_first() {
        let db = DeviceDatabase::new();
        let child = DeviceSpec { model_id: "a-child".into(), parent: Some("tp-wr741ndv1".into()), ..Default::default() };
        let order = db.register_all(vec![child, wr741()]).unwrap();
        assert_eq!(order, ["tp-wr741ndv1", "a-child"]);
    }

    #[test]
    fn capabilities() {
        let db = DeviceDatabase::new();
        db.register(wr741()).unwrap();
        assert!(db.radio_has_feature("tp-wr741ndv1", "multiple-vifs"));
        assert!(!db.radio_has_feature("tp-wr741ndv1", "mimo"));
        assert!(!db.radio_has_feature("nope", "multiple-vifs"));
    }
}
