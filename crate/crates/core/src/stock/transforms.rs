//! Stock transform modules, shared by the OpenWrt and RouterOS platforms.

use std::collections::BTreeMap;

use serde_json::Value as Json;

use crate::firmware::{TransformContext, TransformModule};

fn str_field(v: Option<&Json>) -> Option<&str> {
    v.and_then(Json::as_str)
}

fn enabled(inst: &crate::registry::ItemInstance) -> bool {
    inst.get("enabled").and_then(Json::as_bool).unwrap_or(true)
}

/// Hostname and other system-wide settings.
pub struct SystemModule;

impl TransformModule for SystemModule {
    fn name(&self) -> &str {
        "system"
    }
    fn priority(&self) -> i32 {
        10
    }
    fn apply(&self, ctx: &mut TransformContext<'_>) {
        let name = str_field(ctx.config.value("info", "name")).unwrap_or("node").to_string();
        ctx.output.section("system", "system").set("hostname", name);
    }
}

/// Maps Ethernet interfaces to device ports, switch VLANs and netdevs.
pub struct NetworkModule;

impl TransformModule for NetworkModule {
    fn name(&self) -> &str {
        "network"
    }
    fn priority(&self) -> i32 {
        20
    }
    fn apply(&self, ctx: &mut TransformContext<'_>) {
        let config = ctx.config;
        for (i, inst) in config.instances("interface").iter().enumerate() {
            if inst.item != "EthernetInterfaceConfig" || !enabled(inst) {
                continue;
            }
            let Some(port_id) = str_field(inst.get("eth_port")) else { continue };
            let Some(port) = ctx.device.port(port_id) else {
                let msg = format!("{} has no Ethernet port `{port_id}`", ctx.device.model_id);
                ctx.error(format!("interface[{i}].eth_port"), msg);
                continue;
            };
            if let (Some(sw_id), Some(tag)) = (&port.switch, port.vlan_tag) {
                let sw = ctx.device.switch(sw_id).expect("descriptor references are checked");
                let vlan = sw.vlans.iter().find(|v| v.tag == tag).expect("descriptor references are checked");
                let mut ports: Vec<String> = vec![format!("{}t", sw.cpu_port)];
                ports.extend(vlan.ports.iter().map(u32::to_string));
                let device_name = ctx.device.platform_name(ctx.platform, sw_id).to_string();
                ctx.output
                    .section("switch_vlan", &format!("{sw_id}_vlan{tag}"))
                    .set("device", device_name)
                    .set("vlan", tag)
                    .set("ports", ports.join(" "));
            }
            let uplink = inst.get("uplink").and_then(Json::as_bool).unwrap_or(false);
            let netdev = ctx.device.port_netdev(port);
            ctx.output
                .section("interface", port_id)
                .set("ifname", netdev)
                .set("proto", if uplink { "dhcp" } else { "static" });
        }
    }
}

/// Radios and wireless interfaces, checked against the radio capabilities
/// and the platform's package list.
pub struct WirelessModule {
    pub psk_package: &'static str,
    pub eap_package: &'static str,
}

/// Channels only available in the 5 GHz band.
fn needs_80211a(channel: i64) -> bool {
    (36..=165).contains(&channel)
}

fn valid_channel(channel: i64) -> bool {
    (1..=14).contains(&channel) || needs_80211a(channel)
}

impl TransformModule for WirelessModule {
    fn name(&self) -> &str {
        "wireless"
    }
    fn priority(&self) -> i32 {
        30
    }
    fn apply(&self, ctx: &mut TransformContext<'_>) {
        let config = ctx.config;
        let device = ctx.device;
        // Radio instance index to the device radio it names.
        let mut radios = BTreeMap::new();
        for (j, inst) in config.instances("radio").iter().enumerate() {
            let Some(id) = str_field(inst.get("radio")) else { continue };
            let Some(radio) = device.radio(id) else {
                ctx.error(format!("radio[{j}].radio"), format!("{} has no radio `{id}`", device.model_id));
                continue;
            };
            radios.insert(j, radio);
            let name = device.platform_name(ctx.platform, id).to_string();
            if let Some(proto) = str_field(inst.get("protocol")) {
                if !radio.protocols.contains(proto) {
                    ctx.error(format!("radio[{j}].protocol"), format!("radio `{id}` does not support {proto}"));
                } else {
                    ctx.output.section("wifi-device", &name).set("hwmode", proto.trim_start_matches("802."));
                }
            }
            if let Some(ch) = inst.get("channel").and_then(Json::as_i64) {
                if !valid_channel(ch) {
                    ctx.error(format!("radio[{j}].channel"), format!("{ch} is not a valid channel"));
                } else if needs_80211a(ch) && !radio.protocols.contains("802.11a") {
                    let msg = format!("channel {ch} needs 802.11a, which radio `{id}` does not support");
                    ctx.error(format!("radio[{j}].channel"), msg);
                } else {
                    ctx.output.section("wifi-device", &name).set("channel", ch);
                }
            }
            ctx.output.section("wifi-device", &name).set("disabled", 0);
        }

        let mut vifs: BTreeMap<usize, usize> = BTreeMap::new();
        for (i, inst) in config.instances("interface").iter().enumerate() {
            if inst.item != "WifiInterfaceConfig" || !enabled(inst) {
                continue;
            }
            let Some(r) = inst.get("radio").and_then(Json::as_u64).map(|r| r as usize) else { continue };
            let Some(radio) = radios.get(&r) else {
                if r >= config.instances("radio").len() {
                    ctx.error(format!("interface[{i}].radio"), format!("no radio at index {r}"));
                }
                continue;
            };
            *vifs.entry(r).or_default() += 1;
            let device_name = device.platform_name(ctx.platform, &radio.id).to_string();
            let auth = str_field(inst.get("auth")).unwrap_or("none");
            let encryption = match auth {
                "none" => "none",
                "wpa2-psk" => {
                    ctx.require_package(format!("interface[{i}].auth"), self.psk_package);
                    if str_field(inst.get("key")).is_none_or(str::is_empty) {
                        ctx.error(format!("interface[{i}].key"), "WPA2 personal needs a key");
                    }
                    "psk2"
                }
                "wpa2-eap" => {
                    ctx.require_package(format!("interface[{i}].auth"), self.eap_package);
                    "wpa2"
                }
                other => {
                    ctx.error(format!("interface[{i}].auth"), format!("unsupported authentication `{other}`"));
                    continue;
                }
            };
            let s = ctx.output.section("wifi-iface", &format!("wifinet{i}"));
            s.set("device", device_name)
                .set("mode", str_field(inst.get("mode")).unwrap_or("mesh"))
                .set("encryption", encryption);
            if let Some(essid) = str_field(inst.get("essid")) {
                s.set("ssid", essid);
            }
            if let Some(key) = str_field(inst.get("key")) {
                s.set("key", key);
            }
        }
        for (r, count) in vifs {
            let radio = radios[&r];
            if count > 1 && !radio.features.contains("multiple-vifs") {
                let msg = format!("{count} interfaces on radio `{}`, which supports only one", radio.id);
                ctx.error(format!("radio[{r}]"), msg);
            }
        }
    }
}

/// VPN uplinks.
pub struct VpnModule {
    pub package: &'static str,
}

impl TransformModule for VpnModule {
    fn name(&self) -> &str {
        "vpn"
    }
    fn priority(&self) -> i32 {
        40
    }
    fn apply(&self, ctx: &mut TransformContext<'_>) {
        let config = ctx.config;
        for (k, inst) in config.instances("vpn").iter().enumerate() {
            let Some(server) = str_field(inst.get("server")) else { continue };
            if !ctx.require_package(format!("vpn[{k}]"), self.package) {
                continue;
            }
            ctx.output
                .section("openvpn", &format!("vpn{k}"))
                .set("remote", server)
                .set("proto", str_field(inst.get("protocol")).unwrap_or("openvpn"));
        }
    }
}
