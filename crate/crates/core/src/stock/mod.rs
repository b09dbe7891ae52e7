//! The bundled schema, telemetry parsers, transform modules, platforms and
//! default rules that a fresh installation starts with.
//!
//! Everything here is built through the same public extension interfaces a
//! third-party module would use.

mod parsers;
mod transforms;

use std::sync::Arc;

use crate::firmware::{Platform, RenderStyle, Transformer};
use crate::registry::{FieldSpec, Registry, RegistryError, RuleError, RuleSet, SchemaItem, CONFIG_POINT, MONITORING_POINT};
use crate::telemetry::Dispatcher;

pub use parsers::{GeneralParser, InterfacesParser, ResourcesV1Parser, ResourcesV2Parser, RoutingParser, VpnParser};
pub use transforms::{NetworkModule, SystemModule, VpnModule, WirelessModule};

pub const DEVICE_CHOICES: &str = "core.general#device";
pub const PLATFORM_CHOICES: &str = "core.general#platform";
pub const PROJECT_CHOICES: &str = "core.project#project";
pub const AUTH_CHOICES: &str = "core.interfaces#auth";
pub const MODE_CHOICES: &str = "core.interfaces#mode";

pub const PLATFORMS: [&str; 2] = ["openwrt", "routeros"];
pub const PROJECTS: [(&str, &str); 2] = [("default", "Default"), ("wlan", "Wireless mesh")];

fn config_items() -> Vec<SchemaItem> {
    vec![
        SchemaItem::root("InfoConfig", "info").field(FieldSpec::string("name").required()),
        SchemaItem::subclass("DeviceInfoConfig", "InfoConfig")
            .field(FieldSpec::choice("device", DEVICE_CHOICES))
            .field(FieldSpec::choice("platform", PLATFORM_CHOICES).with_default("openwrt"))
            .field(FieldSpec::integer("version").with_default(1)),
        SchemaItem::root("ProjectConfig", "project").field(FieldSpec::choice("project", PROJECT_CHOICES)),
        SchemaItem::root("RadioConfig", "radio")
            .many()
            .field(FieldSpec::string("radio").required())
            .field(FieldSpec::string("protocol"))
            .field(FieldSpec::integer("channel")),
        SchemaItem::root("InterfaceConfig", "interface")
            .many()
            .field(FieldSpec::boolean("enabled").with_default(true)),
        SchemaItem::subclass("WifiInterfaceConfig", "InterfaceConfig")
            .field(FieldSpec::item_ref("radio", "radio").required())
            .field(FieldSpec::choice("mode", MODE_CHOICES).with_default("mesh"))
            .field(FieldSpec::string("essid"))
            .field(FieldSpec::choice("auth", AUTH_CHOICES).with_default("none"))
            .field(FieldSpec::string("key")),
        SchemaItem::subclass("EthernetInterfaceConfig", "InterfaceConfig")
            .field(FieldSpec::string("eth_port").required())
            .field(FieldSpec::boolean("uplink").with_default(false)),
        SchemaItem::root("VpnConfig", "vpn")
            .many()
            .field(FieldSpec::string("server").required())
            .field(FieldSpec::string("protocol").with_default("openvpn")),
        SchemaItem::root("AllocatedIpConfig", "ip")
            .many()
            .field(FieldSpec::string("pool").required())
            .field(FieldSpec::integer("prefix_length").required())
            .field(FieldSpec::string("prefix")),
    ]
}

fn monitoring_items() -> Vec<SchemaItem> {
    vec![
        SchemaItem::root("GeneralMonitor", "general")
            .field(FieldSpec::string("uuid"))
            .field(FieldSpec::string("hostname"))
            .field(FieldSpec::integer("uptime")),
        SchemaItem::root("StatusMonitor", "status")
            .field(FieldSpec::boolean("online"))
            .field(FieldSpec::integer("last_seen"))
            .field(FieldSpec::string("transport")),
        SchemaItem::root("ResourcesMonitor", "resources")
            .field(FieldSpec::integer("memory_total_kib"))
            .field(FieldSpec::integer("memory_free_kib")),
        SchemaItem::root("InterfaceMonitor", "interfaces")
            .many()
            .field(FieldSpec::string("name").required())
            .field(FieldSpec::integer("tx_bytes"))
            .field(FieldSpec::integer("rx_bytes")),
        SchemaItem::root("RoutingNeighbor", "routing")
            .many()
            .field(FieldSpec::string("neighbor").required())
            .field(FieldSpec::decimal("link_quality")),
        SchemaItem::root("VpnLinkMonitor", "vpn")
            .many()
            .field(FieldSpec::string("server").required())
            .field(FieldSpec::boolean("connected")),
        SchemaItem::root("ComplianceIssue", "compliance")
            .many()
            .field(FieldSpec::string("code").required())
            .field(FieldSpec::string("message")),
    ]
}

/// The stock registry with a device choice for each given model id.
pub fn registry<'a>(device_models: impl IntoIterator<Item = &'a str>) -> Result<Registry, RegistryError> {
    let mut r = Registry::with_standard_points();
    for item in config_items() {
        r.register_item(CONFIG_POINT, item)?;
    }
    for item in monitoring_items() {
        r.register_item(MONITORING_POINT, item)?;
    }
    for model in device_models {
        r.register_choice(DEVICE_CHOICES, model, model)?;
    }
    for p in PLATFORMS {
        r.register_choice(PLATFORM_CHOICES, p, p)?;
    }
    for (value, label) in PROJECTS {
        r.register_choice(PROJECT_CHOICES, value, label)?;
    }
    for (value, label) in [("none", "Open"), ("wpa2-psk", "WPA2 personal"), ("wpa2-eap", "WPA2 enterprise")] {
        r.register_choice(AUTH_CHOICES, value, label)?;
    }
    for (value, label) in [("mesh", "Mesh"), ("ap", "Access point"), ("sta", "Client")] {
        r.register_choice(MODE_CHOICES, value, label)?;
    }
    Ok(r)
}

/// Parsers for the modules the stock agent emits.
pub fn dispatcher() -> Dispatcher {
    let mut d = Dispatcher::new();
    d.register(Arc::new(GeneralParser)).expect("disjoint");
    d.register(Arc::new(ResourcesV1Parser)).expect("disjoint");
    d.register(Arc::new(ResourcesV2Parser)).expect("disjoint");
    d.register(Arc::new(InterfacesParser)).expect("disjoint");
    d.register(Arc::new(RoutingParser)).expect("disjoint");
    d.register(Arc::new(VpnParser)).expect("disjoint");
    d
}

/// Packages installable on the stock OpenWrt platform. The full `wpad`
/// supplicant is deliberately absent, so enterprise authentication cannot be
/// configured there.
pub const OPENWRT_PACKAGES: [&str; 4] = ["wpad-mini", "openvpn-openssl", "kmod-batman-adv", "uhttpd"];
pub const ROUTEROS_PACKAGES: [&str; 3] = ["wireless", "security", "ppp"];

pub fn transformer() -> Transformer {
    let mut t = Transformer::new();
    t.register_platform(
        Platform::new("openwrt", RenderStyle::Uci, OPENWRT_PACKAGES)
            .with_module(Arc::new(SystemModule))
            .with_module(Arc::new(NetworkModule))
            .with_module(Arc::new(WirelessModule { psk_package: "wpad-mini", eap_package: "wpad" }))
            .with_module(Arc::new(VpnModule { package: "openvpn-openssl" })),
    );
    t.register_platform(
        Platform::new("routeros", RenderStyle::KeyValue, ROUTEROS_PACKAGES)
            .with_module(Arc::new(SystemModule))
            .with_module(Arc::new(NetworkModule))
            .with_module(Arc::new(WirelessModule { psk_package: "security", eap_package: "security" }))
            .with_module(Arc::new(VpnModule { package: "ppp" })),
    );
    t
}

/// Default rules for the configuration form.
pub const RULES_JSON: &str = r#"{
  "device_path": "info.device",
  "rules": [
    {
      "id": "wlan-project",
      "when": {"eq": {"path": "project.project", "value": "wlan"}},
      "actions": [{"set_default": {"path": "radio.radio", "value": "wifi0"}}],
      "children": [
        {
          "id": "wlan-two-vifs",
          "when": {"radio_feature": {"feature": "multiple-vifs"}},
          "actions": [
            {"remove_instances": {"item": "WifiInterfaceConfig"}},
            {"create_instance": {"item": "WifiInterfaceConfig", "values": {"radio": 0, "mode": "mesh", "essid": "mesh.wlan"}}},
            {"create_instance": {"item": "WifiInterfaceConfig", "values": {"radio": 0, "mode": "ap", "essid": "wlan"}}}
          ]
        },
        {
          "id": "wlan-one-vif",
          "when": {"not": {"radio_feature": {"feature": "multiple-vifs"}}},
          "actions": [
            {"remove_instances": {"item": "WifiInterfaceConfig"}},
            {"create_instance": {"item": "WifiInterfaceConfig", "values": {"radio": 0, "mode": "mesh", "essid": "mesh.wlan"}}}
          ]
        }
      ]
    }
  ]
}"#;

pub fn rules(registry: &Registry) -> Result<RuleSet, RuleError> {
    RuleSet::from_json(registry, CONFIG_POINT, RULES_JSON)
}
