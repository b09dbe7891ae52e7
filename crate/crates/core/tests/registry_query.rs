//! Registry queries against a brute-force walk over the raw JSON documents.

use std::collections::BTreeSet;
use std::sync::Arc;

use meshwatch_core::registry::{Comparison, Predicate, CONFIG_POINT};
use meshwatch_core::{stock, ConfigDocument, ItemInstance, NodeDatabase, NodeId};
use proptest::prelude::*;
use serde_json::{json, Value as Json};

const PATHS: [&str; 11] = [
    "info.name",
    "info.device",
    "info.version",
    "project.project",
    "radio.channel",
    "radio.protocol",
    "interface.enabled",
    "interface.mode",
    "interface.eth_port",
    "interface.radio.channel",
    "interface.radio.protocol",
];

fn literals() -> Vec<Json> {
    vec![
        json!("a"),
        json!("b"),
        json!("dev-1"),
        json!("dev-2"),
        json!(1),
        json!(2.0),
        json!(6),
        json!(36),
        json!("802.11n"),
        json!("802.11a"),
        json!(true),
        json!(false),
        json!("mesh"),
        json!("ap"),
        json!("wlan"),
        json!("lan0"),
        json!(null),
    ]
}

fn instance() -> impl Strategy<Value = (String, ItemInstance)> {
    let name = prop::sample::select(vec!["a", "b", "c"]);
    let device = prop::sample::select(vec!["dev-1", "dev-2"]);
    let proto = prop::sample::select(vec!["802.11n", "802.11a", "802.11g"]);
    let channel = prop::sample::select(vec![1i64, 6, 11, 36]);
    let mode = prop::sample::select(vec!["mesh", "ap"]);
    prop_oneof![
        (name, device, 1i64..3).prop_map(|(n, d, v)| (
            "info".to_string(),
            ItemInstance::new("DeviceInfoConfig").with("name", n).with("device", d).with("version", v)
        )),
        prop::sample::select(vec!["default", "wlan"])
            .prop_map(|p| ("project".to_string(), ItemInstance::new("ProjectConfig").with("project", p))),
        (proto, channel, any::<bool>()).prop_map(|(p, c, with_channel)| {
            let i = ItemInstance::new("RadioConfig").with("radio", "wifi0").with("protocol", p);
            ("radio".to_string(), if with_channel { i.with("channel", c) } else { i })
        }),
        (0u64..3, mode, any::<bool>()).prop_map(|(r, m, e)| (
            "interface".to_string(),
            ItemInstance::new("WifiInterfaceConfig").with("radio", r).with("mode", m).with("enabled", e)
        )),
        (prop::sample::select(vec!["lan0", "wan0"]), prop::option::of(any::<bool>())).prop_map(|(p, e)| {
            let i = ItemInstance::new("EthernetInterfaceConfig").with("eth_port", p);
            ("interface".to_string(), match e {
                Some(e) => i.with("enabled", e),
                None => i.with("enabled", Json::Null),
            })
        }),
    ]
}

fn document() -> impl Strategy<Value = ConfigDocument> {
    prop::collection::vec(instance(), 0..8).prop_map(|items| {
        let mut doc = ConfigDocument::new();
        for (rid, inst) in items {
            // Single-instance registry ids keep their first instance.
            if (rid == "info" || rid == "project") && !doc.instances(&rid).is_empty() {
                continue;
            }
            doc.push(&rid, inst);
        }
        // Point references at existing radios so that most documents pass
        // the schema check and get stored.
        let radios = doc.instances("radio").len() as u64;
        doc.instances_mut("interface").retain(|i| i.item != "WifiInterfaceConfig" || radios > 0);
        for i in doc.instances_mut("interface") {
            if let Some(r) = i.get("radio").and_then(Json::as_u64) {
                i.values.insert("radio".into(), (r % radios).into());
            }
        }
        doc.0.retain(|_, v| !v.is_empty());
        doc
    })
}

fn predicate() -> impl Strategy<Value = Predicate> {
    let lit = prop::sample::select(literals());
    let path = prop::sample::select(PATHS.to_vec());
    (path, 0..3u8, lit.clone(), prop::collection::vec(lit, 0..4)).prop_map(|(p, op, v, vs)| {
        let c = match op {
            0 => Comparison::Eq(v),
            1 => Comparison::Ne(v),
            _ => Comparison::In(vs),
        };
        Predicate::new(p, c)
    })
}

/// Values a path reaches in the serialized document. Only
/// `interface.radio` is a reference in the paths used here.
fn reach(doc: &Json, path: &str) -> Vec<Json> {
    let segs: Vec<&str> = path.split('.').collect();
    let list = |rid: &str| doc.get(rid).and_then(Json::as_array).cloned().unwrap_or_default();
    let mut current = list(segs[0]);
    for (i, seg) in segs[1..].iter().enumerate() {
        let last = i == segs.len() - 2;
        if last {
            return current.iter().filter_map(|o| o.get(*seg).cloned()).collect();
        }
        let radios = list("radio");
        current = current
            .iter()
            .filter_map(|o| o.get(*seg).and_then(Json::as_u64))
            .filter_map(|idx| radios.get(idx as usize).cloned())
            .collect();
    }
    Vec::new()
}

fn same(a: &Json, b: &Json) -> bool {
    match (a, b) {
        (Json::Number(x), Json::Number(y)) => x.as_f64() == y.as_f64(),
        _ => a == b,
    }
}

fn oracle(doc: &Json, p: &Predicate) -> bool {
    reach(doc, &p.path.join(".")).iter().filter(|v| !v.is_null()).any(|v| match &p.comparison {
        Comparison::Eq(x) => same(v, x),
        Comparison::Ne(x) => !same(v, x),
        Comparison::In(xs) => xs.iter().any(|x| same(v, x)),
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn query_equals_brute_force(docs in prop::collection::vec(document(), 1..40),
                                preds in prop::collection::vec(predicate(), 1..10)) {
        let registry = Arc::new(stock::registry(["dev-1", "dev-2"]).unwrap());
        let db = NodeDatabase::new(registry);
        let mut raw = Vec::new();
        for (i, doc) in docs.into_iter().enumerate() {
            let id = NodeId::from_u128(i as u128 + 1);
            db.create_node(id, 0).unwrap();
            let json = serde_json::to_value(&doc).unwrap();
            // Documents failing the schema are not stored; the oracle then
            // sees an empty document as well.
            let stored = db.put_document(&id, CONFIG_POINT, doc).is_ok();
            raw.push((id, if stored { json } else { json!({}) }));
        }
        for p in preds {
            let parsed: Predicate = p.to_string().parse().unwrap();
            prop_assert_eq!(&parsed, &p);
            let got = db.query(CONFIG_POINT, &p).unwrap();
            let want: BTreeSet<NodeId> = raw.iter().filter(|(_, d)| oracle(d, &p)).map(|(id, _)| *id).collect();
            prop_assert_eq!(got, want, "{}", p);
        }
    }
}

#[test]
fn unknown_paths_are_rejected() {
    let registry = Arc::new(stock::registry([]).unwrap());
    let db = NodeDatabase::new(registry);
    assert!(db.query(CONFIG_POINT, &Predicate::eq("info.colour", "red")).is_err());
    assert!(db.query(CONFIG_POINT, &Predicate::eq("nothing.name", "x")).is_err());
}
