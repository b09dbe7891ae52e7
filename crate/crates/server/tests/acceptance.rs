//! Acceptance suite. Prints one PASS/FAIL line per criterion, with its
//! runtime, and exits nonzero if any criterion fails.
//!
//! Run with `cargo test -p meshwatch-server --test acceptance` (add
//! `--release` for representative timings).

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::{Duration, Instant};

use meshwatch_core::allocator::BlockStatus;
use meshwatch_core::datastream::{tags, AggregateBucket, Datastream, Granularity, Series, Value, ValueType};
use meshwatch_core::monitor::{
    run_sequential, Context, NetworkProcessor, NodeFailure, NodeProcessor, NodeView, Pipeline, Processor,
    ProcessorError, RunInfo, Runner, WorkingSet,
};
use meshwatch_core::registry::{Comparison, Predicate, CONFIG_POINT};
use meshwatch_core::{stock, ConfigDocument, IpPrefix, ItemInstance, NodeDatabase, NodeId, Pool, PoolError, Timestamp};
use meshwatch_server::{App, AppError, Clock, NewNode, ServiceConfig, SimNodeProfile, TelemetrySetup};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value as Json};

type Outcome = Result<String, String>;
type Criterion = (&'static str, f64, fn() -> Outcome);
/// Stream tags (debug-formatted) and their samples.
type Samples = Vec<(String, Vec<(Timestamp, Value)>)>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn devices_dir() -> std::path::PathBuf {
    concat!(env!("CARGO_MANIFEST_DIR"), "/../../devices").into()
}

fn fixture(name: &str) -> ConfigDocument {
    let path = format!("{}/../../fixtures/{name}", env!("CARGO_MANIFEST_DIR"));
    serde_json::from_str(&std::fs::read_to_string(path).expect("fixture")).expect("fixture json")
}

fn service_config() -> ServiceConfig {
    ServiceConfig { device_dir: devices_dir(), ..ServiceConfig::default() }
}

// 1. Counter derivative ------------------------------------------------------

fn counter_derivative() -> Outcome {
    let rate_after = |uptimes: [f64; 2]| -> Result<Vec<Value>, String> {
        let store = Datastream::new();
        let g = Granularity::Seconds10;
        let up = store.ensure_stream(tags([("metric", "uptime")]), ValueType::Numeric, g, None).map_err(|e| e.to_string())?;
        let ctr = store.ensure_stream(tags([("metric", "tx")]), ValueType::Numeric, g, None).map_err(|e| e.to_string())?;
        let resets = store.derive_reset(tags([("metric", "reset")]), up).map_err(|e| e.to_string())?;
        let rate = store.derive_counter(tags([("metric", "rate")]), ctr, resets, 255).map_err(|e| e.to_string())?;
        for (t, u, v) in [(1_000, uptimes[0], 212.0), (1_010, uptimes[1], 37.0)] {
            store.append(up, t, u).map_err(|e| e.to_string())?;
            store.append(ctr, t, v).map_err(|e| e.to_string())?;
        }
        Ok(store.points(rate).map_err(|e| e.to_string())?.into_iter().map(|p| p.value).collect())
    };
    let wrapped = rate_after([500.0, 510.0])?;
    ensure!(wrapped == [Value::Number(8.0)], "wrap without reset gave {wrapped:?}, expected [8.0]");
    let reset = rate_after([500.0, 3.0])?;
    ensure!(reset == [Value::Null], "wrap with reset gave {reset:?}, expected [null]");
    Ok("212 -> 37 over 10 s at max 255 is 8.0/s; null across a reset".into())
}

// 2. Downsample oracle -------------------------------------------------------

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

fn check_bucket(got: &AggregateBucket, ts: Timestamp, values: &[f64]) -> Result<(), String> {
    let n = values.len() as f64;
    let sum: f64 = values.iter().sum();
    let ss: f64 = values.iter().map(|v| v * v).sum();
    let mean = sum / n;
    let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    ensure!(got.ts == ts && got.count == values.len() as u64, "bucket {ts}: count {} vs {}", got.count, values.len());
    // Sums are accumulated in timestamp order in both places, so they agree bit for bit.
    ensure!(got.sum == sum && got.min == min && got.max == max, "bucket {ts}: sum/min/max differ");
    ensure!(close(got.mean, mean), "bucket {ts}: mean {} vs {mean}", got.mean);
    ensure!(close(got.sum_squares, ss), "bucket {ts}: sum of squares {} vs {ss}", got.sum_squares);
    let stddev = variance.sqrt();
    ensure!(close(got.stddev, stddev), "bucket {ts}: stddev {} vs {stddev}", got.stddev);
    Ok(())
}

fn downsample_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let store = Datastream::new();
    let mut all = Vec::new();
    for s in 0..50 {
        let id = store
            .ensure_stream(tags([("stream", &s.to_string())]), ValueType::Numeric, Granularity::Seconds10, None)
            .map_err(|e| e.to_string())?;
        let mut t: Timestamp = 1_700_000_000 + rng.random_range(0..600);
        // Large offsets against a small spread stress the deviation.
        let offset: f64 = rng.random_range(-1e6..1e6);
        let mut points = Vec::with_capacity(10_000);
        for _ in 0..10_000 {
            t += rng.random_range(1..40);
            let v = offset + rng.random_range(-100.0..100.0);
            store.append(id, t, v).map_err(|e| e.to_string())?;
            points.push((t, v));
        }
        all.push((id, points));
    }
    store.downsample_all(i64::MAX).map_err(|e| e.to_string())?;
    let mut checked = 0usize;
    for (id, points) in &all {
        let watermark = points.last().expect("points").0;
        for g in Granularity::Seconds10.coarser() {
            let mut groups: BTreeMap<Timestamp, Vec<f64>> = BTreeMap::new();
            for &(t, v) in points {
                groups.entry(g.bucket_start(t)).or_default().push(v);
            }
            groups.retain(|b, _| b + g.seconds() <= watermark + 1);
            let Series::Buckets(got) = store.query(*id, g, i64::MIN, i64::MAX).map_err(|e| e.to_string())? else {
                return Err("numeric stream returned points".into());
            };
            ensure!(got.len() == groups.len(), "stream {id} at {g}: {} buckets vs {}", got.len(), groups.len());
            for (b, (ts, values)) in got.iter().zip(&groups) {
                check_bucket(b, *ts, values)?;
            }
            checked += got.len();
        }
    }
    Ok(format!("500000 points, {checked} buckets over 5 coarser granularities"))
}

// 3. Pipeline equivalence ----------------------------------------------------

#[derive(Clone, Debug)]
enum Step {
    Add(u8, u8),
    DropOdd,
    Sum(i64),
    Inc(i64),
    Square,
    Fail(u8),
}

fn pnode(i: u8) -> NodeId {
    NodeId::from_u128(0x5000 + u128::from(i))
}

fn get_x(p: Option<&BTreeMap<String, Json>>) -> i64 {
    p.and_then(|p| p.get("x")).and_then(Json::as_i64).unwrap_or(0)
}

struct Net(Step, String);
struct Node(Step, String);

impl NetworkProcessor for Net {
    fn name(&self) -> &str {
        &self.1
    }
    fn process(&self, working: &mut WorkingSet, ctx: &mut Context, _: &RunInfo) -> Result<(), ProcessorError> {
        match self.0 {
            Step::Add(lo, hi) => working.extend((lo..hi).map(pnode)),
            Step::DropOdd => working.retain(|n| get_x(ctx.per_node.get(n)) % 2 == 0),
            Step::Sum(limit) => {
                let total: i64 = working.iter().map(|n| get_x(ctx.per_node.get(n))).sum();
                ctx.global.insert("total".into(), json!(total));
                if total > limit {
                    return Err(format!("total {total} above {limit}").into());
                }
            }
            _ => unreachable!(),
        }
        Ok(())
    }
}

impl NodeProcessor for Node {
    fn name(&self) -> &str {
        &self.1
    }
    fn process(&self, view: &mut NodeView<'_>, _: &RunInfo) -> Result<(), ProcessorError> {
        let total = view.global.get("total").and_then(Json::as_i64).unwrap_or(0);
        match self.0 {
            Step::Inc(by) => {
                let x = get_x(Some(view.local)) + by + total % 3;
                view.local.insert("x".into(), json!(x));
            }
            Step::Square => {
                let x = get_x(Some(view.local));
                view.local.insert("y".into(), json!(x * x));
            }
            Step::Fail(m) => {
                view.local.insert("x".into(), json!(-999));
                if view.node.as_u128() % u128::from(m) == 0 {
                    return Err("refused".into());
                }
                view.local.remove("x");
            }
            _ => unreachable!(),
        }
        Ok(())
    }
}

fn random_pipeline(rng: &mut ChaCha8Rng) -> Pipeline {
    let len = rng.random_range(1..12);
    let processors = (0..len)
        .map(|i| {
            let name = format!("p{i}");
            match rng.random_range(0..6) {
                0 => {
                    let a = rng.random_range(0..50u8);
                    let b = rng.random_range(a..50u8);
                    Processor::Network(Arc::new(Net(Step::Add(a, b + 1), name)))
                }
                1 => Processor::Network(Arc::new(Net(Step::DropOdd, name))),
                2 => Processor::Network(Arc::new(Net(Step::Sum(rng.random_range(-40..120)), name))),
                3 => Processor::Node(Arc::new(Node(Step::Inc(rng.random_range(-3..4)), name))),
                4 => Processor::Node(Arc::new(Node(Step::Square, name))),
                _ => Processor::Node(Arc::new(Node(Step::Fail(rng.random_range(2..6)), name))),
            }
        })
        .collect();
    Pipeline::new("random", 60, processors).expect("nonzero interval")
}

fn sorted(mut f: Vec<NodeFailure>) -> Vec<NodeFailure> {
    f.sort_by(|a, b| (a.node, &a.processor).cmp(&(b.node, &b.processor)));
    f
}

fn pipeline_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut aborted = 0;
    let mut failures = 0;
    for case in 0..100 {
        let pipeline = random_pipeline(&mut rng);
        let mut initial = Context::default();
        for _ in 0..rng.random_range(0..30) {
            let n = pnode(rng.random_range(0..50));
            initial.per_node.entry(n).or_default().insert("x".into(), json!(rng.random_range(-20..20)));
        }
        let workers = rng.random_range(1..9);
        let fused = Runner::new(workers).run(&pipeline, initial.clone(), 0);
        let (working, context, fails) = run_sequential(&pipeline, initial, 0);
        ensure!(fused.working == working, "case {case}: working sets differ");
        ensure!(fused.working.iter().eq(working.iter()), "case {case}: working set order differs");
        ensure!(fused.context == context, "case {case}: contexts differ");
        ensure!(sorted(fused.report.node_failures.clone()) == sorted(fails), "case {case}: node failures differ");
        aborted += fused.report.aborted.is_some() as usize;
        failures += fused.report.node_failures.len();
    }
    Ok(format!("100 pipelines equal ({aborted} aborted, {failures} node failures)"))
}

// 4. Allocator safety --------------------------------------------------------

fn allocator_safety() -> Outcome {
    const HOLDDOWN: i64 = 300;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let root: IpPrefix = "10.20.0.0/16".parse().expect("literal");
    let mut pool = Pool::new("acceptance", root, HOLDDOWN).map_err(|e| e.to_string())?;
    let mut now: Timestamp = 0;
    let mut live: Vec<IpPrefix> = Vec::new();
    let mut freed: Vec<(IpPrefix, Timestamp)> = Vec::new();
    let (mut allocs, mut frees, mut exhausted) = (0, 0, 0);
    for step in 0..10_000 {
        match rng.random_range(0..10) {
            0..=4 => {
                let len = rng.random_range(20..=30);
                match pool.allocate(len, NodeId::from_u128(step), now) {
                    Ok(a) => {
                        allocs += 1;
                        ensure!(a.prefix.len() == len && root.contains(&a.prefix), "step {step}: bad prefix {}", a.prefix);
                        if let Some(l) = live.iter().find(|l| l.overlaps(&a.prefix)) {
                            return Err(format!("step {step}: {} overlaps live {l}", a.prefix));
                        }
                        if let Some((p, at)) = freed.iter().find(|(p, at)| p.overlaps(&a.prefix) && now < at + HOLDDOWN) {
                            return Err(format!("step {step}: {} reuses {p} {}s after its release", a.prefix, now - at));
                        }
                        live.push(a.prefix);
                    }
                    Err(PoolError::PoolExhausted(_)) => exhausted += 1,
                    Err(e) => return Err(format!("step {step}: {e}")),
                }
            }
            5..=7 if !live.is_empty() => {
                let p = live.swap_remove(rng.random_range(0..live.len()));
                pool.free(p, now).map_err(|e| format!("step {step}: {e}"))?;
                freed.push((p, now));
                frees += 1;
            }
            8 => now += rng.random_range(1..60),
            _ => {
                pool.expire(now);
            }
        }
        freed.retain(|(_, at)| now < at + HOLDDOWN);
    }
    // Release everything, let every hold-down lapse, and expect one free root.
    for p in live.drain(..) {
        pool.free(p, now).map_err(|e| e.to_string())?;
    }
    now += HOLDDOWN;
    pool.expire(now);
    let leaves: Vec<_> = pool.leaves().collect();
    ensure!(leaves == [(root, BlockStatus::Free)], "after global expiry {} leaves remain, not one free root", leaves.len());
    Ok(format!("{allocs} allocations, {frees} frees, {exhausted} exhausted; merged back to {root}"))
}

// 5. Validation gate ---------------------------------------------------------

fn validation_gate() -> Outcome {
    let app = App::new(service_config(), Clock::virtual_at(0)).map_err(|e| e.to_string())?;
    let node = app.create_node(NewNode::default()).map_err(|e| e.to_string())?.uuid;
    for (name, module, hint) in [
        ("channel_80211a_mismatch.json", "wireless", "channel"),
        ("missing_package.json", "wireless", "wpad"),
    ] {
        match app.set_config(&node, fixture(name)) {
            Err(AppError::Invalid { code: "validation-failed", details, .. }) => {
                ensure!(!details.is_empty(), "{name}: rejected without errors");
                ensure!(details.iter().all(|d| d.module == module), "{name}: errors not attributed to {module}: {details:?}");
                ensure!(
                    details.iter().any(|d| d.path.contains(hint) || d.message.contains(hint)),
                    "{name}: no error mentions {hint}: {details:?}"
                );
            }
            other => return Err(format!("{name}: expected rejection, got {other:?}")),
        }
        ensure!(app.db.get_config(&node).map_err(|e| e.to_string())?.0.is_empty(), "{name}: rejected config was stored");
    }
    app.set_config(&node, fixture("valid_minimal.json")).map_err(|e| format!("valid fixture: {e}"))?;
    let mut digests = Vec::new();
    for _ in 0..2 {
        let id = app.build(&node, "openwrt").map_err(|e| e.to_string())?;
        let job = app.builds.wait(id, Duration::from_secs(5)).ok_or("build did not finish")?;
        match job.state {
            meshwatch_core::firmware::BuildState::Done { bundle } => digests.push(bundle.digest),
            other => return Err(format!("build {id} ended as {other:?}")),
        }
    }
    ensure!(digests[0] == digests[1], "digests differ: {} vs {}", digests[0], digests[1]);
    Ok(format!("both fixtures rejected by the wireless module; digest {}", &digests[0][..16]))
}

// 6. Sample document push/pull round trip ------------------------------------

/// The sample agent document exactly as published, trailing comma included.
const SAMPLE_DOCUMENT: &str = r#"{
  "core.general": {
    "_meta": { "version": 4 },

    "uuid": "64840ad9-aac1-4494-b4d1-9de5d8cbedd9",
    "hostname": "test-4",
  },
  "core.resources": {
    "_meta": { "version": 2 },

    "memory": {
      "total": 32768,
      "free": 24611
    }
  }
}"#;

fn sample_round_trip() -> Outcome {
    const T: Timestamp = 1_700_000_040;
    let uuid: NodeId = "64840ad9-aac1-4494-b4d1-9de5d8cbedd9".parse().expect("literal");
    let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(1).enable_all().build().map_err(|e| e.to_string())?;
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).map_err(|e| e.to_string())?;
    let addr = listener.local_addr().map_err(|e| e.to_string())?;
    let feed = axum::Router::new().route(
        "/nodes/{uuid}/nodewatcher/feed",
        axum::routing::get(|| async { SAMPLE_DOCUMENT }),
    );
    rt.spawn(async move { axum::serve(listener, feed).await });

    let ingest = |mode: &str| -> Result<(Json, Samples), String> {
        let app = App::new(service_config(), Clock::virtual_at(T)).map_err(|e| e.to_string())?;
        let telemetry = match mode {
            "push" => TelemetrySetup::default(),
            _ => TelemetrySetup {
                mode: meshwatch_core::telemetry::SourceMode::Pull,
                pull_url: Some(format!("http://{addr}/nodes/{uuid}/nodewatcher/feed")),
                interval_s: None,
            },
        };
        let req = NewNode { uuid: Some(uuid), token: Some("t".into()), telemetry: Some(telemetry), config: None };
        app.create_node(req).map_err(|e| e.to_string())?;
        if mode == "push" {
            app.hub.ingest_push(SAMPLE_DOCUMENT.as_bytes(), Some("Bearer t"), T).map_err(|e| e.to_string())?;
        }
        let report = app.run_pipeline("monitoring").ok_or("no monitoring pipeline")?;
        ensure!(report.succeeded(), "{mode}: run failed: {report:?}");
        let (_, staged) = app.hub.staged(&uuid).ok_or(format!("{mode}: nothing staged"))?;
        let items = serde_json::to_value(&staged.items).map_err(|e| e.to_string())?;
        let mut samples = Vec::new();
        for meta in app.streams.find(&tags([("node", uuid.to_string().as_str())])) {
            let pts = app.streams.points(meta.id).map_err(|e| e.to_string())?;
            samples.push((format!("{:?}", meta.tags), pts.into_iter().map(|p| (p.ts, p.value)).collect()));
        }
        samples.sort_by(|a, b| a.0.cmp(&b.0));
        Ok((items, samples))
    };
    let (pushed, push_samples) = ingest("push")?;
    let (pulled, pull_samples) = ingest("pull")?;
    rt.shutdown_timeout(Duration::from_secs(1));

    ensure!(pushed == pulled, "staged items differ:\n{pushed}\n{pulled}");
    ensure!(push_samples == pull_samples, "stream samples differ: {push_samples:?} vs {pull_samples:?}");
    let expect = [
        (pushed["general"][0]["uuid"].clone(), json!("64840ad9-aac1-4494-b4d1-9de5d8cbedd9")),
        (pushed["general"][0]["hostname"].clone(), json!("test-4")),
        (pushed["resources"][0]["memory_total_kib"].clone(), json!(32768)),
        (pushed["resources"][0]["memory_free_kib"].clone(), json!(24611)),
    ];
    for (got, want) in expect {
        ensure!(got == want, "staged {got} where {want} was expected");
    }
    ensure!(!push_samples.is_empty(), "no samples were stored");
    Ok(format!("identical items and {} identical streams", push_samples.len()))
}

// 7. Desk-scale network ------------------------------------------------------

fn desk_scale_network() -> Outcome {
    let profile = SimNodeProfile {
        count: 400,
        modules: ["core.general", "core.resources", "core.interfaces", "core.routing", "core.vpn"].map(String::from).to_vec(),
        push_fraction: 0.5,
        down_probability: 0.05,
        report_interval_s: 10,
        seed: 7,
        ..SimNodeProfile::default()
    };
    let config = ServiceConfig { fleet: Some(profile), monitor_workers: 8, ..service_config() };
    let (summary, app) = meshwatch_server::simulate(config, 1_700_000_000, 15 * 60).map_err(|e| e.to_string())?;
    ensure!(summary.nodes == 400 && app.db.len() == 400, "fleet has {} nodes, service {}", summary.nodes, app.db.len());
    ensure!(summary.runs.len() == 15, "{} monitoring runs in 15 minutes", summary.runs.len());
    ensure!(summary.runs.iter().all(|r| !r.aborted), "a run aborted");
    for r in &summary.runs {
        let reported = r.online_reported.ok_or(format!("no online count stored at {}", r.at))?;
        let truth = r.online_truth.ok_or(format!("no ground truth at {}", r.at))?;
        ensure!(reported == truth as f64, "at {}: stream says {reported} online, truth {truth}", r.at);
    }
    ensure!(summary.max_run_ms < 10_000.0, "slowest run took {:.0} ms", summary.max_run_ms);
    let min = summary.runs.iter().filter_map(|r| r.online_truth).min().unwrap_or(0);
    let max = summary.runs.iter().filter_map(|r| r.online_truth).max().unwrap_or(0);
    Ok(format!(
        "400 nodes ({} push), 15 runs match truth ({min}..{max} online), slowest run {:.0} ms",
        summary.push_nodes, summary.max_run_ms
    ))
}

// 8. Registry query oracle ---------------------------------------------------

const PATHS: [&str; 10] = [
    "info.name",
    "info.device",
    "info.version",
    "project.project",
    "radio.channel",
    "radio.protocol",
    "interface.enabled",
    "interface.mode",
    "interface.radio.channel",
    "interface.radio.protocol",
];

fn random_document(rng: &mut ChaCha8Rng) -> ConfigDocument {
    let mut doc = ConfigDocument::new();
    doc.push(
        "info",
        ItemInstance::new("DeviceInfoConfig")
            .with("name", *["a", "b", "c"].choose(rng).expect("nonempty"))
            .with("device", *["dev-1", "dev-2"].choose(rng).expect("nonempty"))
            .with("version", rng.random_range(1..3)),
    );
    if rng.random_bool(0.5) {
        doc.push("project", ItemInstance::new("ProjectConfig").with("project", *["default", "wlan"].choose(rng).expect("nonempty")));
    }
    let radios = rng.random_range(0..3u64);
    for _ in 0..radios {
        let mut r = ItemInstance::new("RadioConfig")
            .with("radio", "wifi0")
            .with("protocol", *["802.11n", "802.11a", "802.11g"].choose(rng).expect("nonempty"));
        if rng.random_bool(0.7) {
            r = r.with("channel", *[1, 6, 11, 36].choose(rng).expect("nonempty"));
        }
        doc.push("radio", r);
    }
    for _ in 0..rng.random_range(0..4) {
        // Subclass instances of both kinds under one registry id.
        let i = if radios > 0 && rng.random_bool(0.6) {
            ItemInstance::new("WifiInterfaceConfig")
                .with("radio", rng.random_range(0..radios))
                .with("mode", *["mesh", "ap"].choose(rng).expect("nonempty"))
                .with("enabled", rng.random_bool(0.5))
        } else {
            ItemInstance::new("EthernetInterfaceConfig").with("eth_port", *["lan0", "wan0"].choose(rng).expect("nonempty"))
        };
        doc.push("interface", i);
    }
    doc
}

fn random_predicate(rng: &mut ChaCha8Rng) -> Predicate {
    let literals = [
        json!("a"),
        json!("dev-1"),
        json!(1),
        json!(2.0),
        json!(6),
        json!(36),
        json!("802.11a"),
        json!(true),
        json!(false),
        json!("mesh"),
        json!("wlan"),
        json!(null),
    ];
    let path = *PATHS.choose(rng).expect("nonempty");
    let op = rng.random_range(0..3);
    let n = rng.random_range(0..4);
    let mut lit = || literals.choose(rng).cloned().expect("nonempty");
    let comparison = match op {
        0 => Comparison::Eq(lit()),
        1 => Comparison::Ne(lit()),
        _ => Comparison::In((0..n).map(|_| lit()).collect()),
    };
    Predicate::new(path, comparison)
}

/// Values reached by a path in the serialized document, following the
/// interface-to-radio reference by index.
fn reach(doc: &Json, path: &str) -> Vec<Json> {
    let segs: Vec<&str> = path.split('.').collect();
    let list = |rid: &str| doc.get(rid).and_then(Json::as_array).cloned().unwrap_or_default();
    let items = list(segs[0]);
    match segs.len() {
        2 => items.iter().filter_map(|o| o.get(segs[1]).cloned()).collect(),
        _ => {
            let radios = list("radio");
            items
                .iter()
                .filter_map(|o| o.get(segs[1]).and_then(Json::as_u64))
                .filter_map(|i| radios.get(i as usize))
                .filter_map(|r| r.get(segs[2]).cloned())
                .collect()
        }
    }
}

fn same(a: &Json, b: &Json) -> bool {
    match (a.as_f64(), b.as_f64()) {
        (Some(x), Some(y)) => x == y,
        _ => a == b,
    }
}

fn brute_force(doc: &Json, p: &Predicate) -> bool {
    reach(doc, &p.path.join(".")).iter().filter(|v| !v.is_null()).any(|v| match &p.comparison {
        Comparison::Eq(x) => same(v, x),
        Comparison::Ne(x) => !same(v, x),
        Comparison::In(xs) => xs.iter().any(|x| same(v, x)),
    })
}

fn registry_query_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let registry = Arc::new(stock::registry(["dev-1", "dev-2"]).map_err(|e| e.to_string())?);
    let db = NodeDatabase::new(registry);
    let mut raw = Vec::new();
    for i in 0..200u128 {
        let id = NodeId::from_u128(i + 1);
        db.create_node(id, 0).map_err(|e| e.to_string())?;
        let doc = random_document(&mut rng);
        let json = serde_json::to_value(&doc).map_err(|e| e.to_string())?;
        db.put_document(&id, CONFIG_POINT, doc).map_err(|e| format!("node {i}: {e}"))?;
        raw.push((id, json));
    }
    let mut hits = 0;
    for _ in 0..50 {
        let p = random_predicate(&mut rng);
        let got = db.query(CONFIG_POINT, &p).map_err(|e| e.to_string())?;
        let want: BTreeSet<NodeId> = raw.iter().filter(|(_, d)| brute_force(d, &p)).map(|(id, _)| *id).collect();
        ensure!(got == want, "`{p}`: query found {} nodes, brute force {}", got.len(), want.len());
        hits += got.len();
    }
    Ok(format!("50 predicates over 200 nodes agree ({hits} total matches)"))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("counter-derivative fidelity", 1.0, counter_derivative),
        ("downsample oracle", 60.0, downsample_oracle),
        ("pipeline equivalence", 120.0, pipeline_equivalence),
        ("allocator safety", 30.0, allocator_safety),
        ("validation gate", 5.0, validation_gate),
        ("sample document push/pull round trip", f64::INFINITY, sample_round_trip),
        ("desk-scale network", f64::INFINITY, desk_scale_network),
        ("registry query oracle", f64::INFINITY, registry_query_oracle),
    ];
    let mut failed = 0;
    for (name, budget_s, run) in criteria {
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        let outcome = match outcome {
            Ok(msg) if secs >= budget_s => Err(format!("{msg}; took {secs:.2}s, budget {budget_s}s")),
            other => other,
        };
        match outcome {
            Ok(msg) => println!("PASS  {name:<38} {secs:>7.2}s  {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL  {name:<38} {secs:>7.2}s  {msg}");
            }
        }
    }
    println!("{} of 8 criteria passed", 8 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
