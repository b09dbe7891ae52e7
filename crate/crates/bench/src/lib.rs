//! Workload generators shared by the benchmarks.

use std::sync::Arc;

use meshwatch_core::datastream::{tags, Datastream, Granularity, ValueType};
use meshwatch_core::{StreamId, Timestamp};
use meshwatch_server::{App, Clock, Fleet, PushSink, ServiceConfig, SimNodeProfile};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPOCH: Timestamp = 1_700_000_000;

/// Random walk of `n` points, one every 10 s on average.
pub fn random_series(n: usize, seed: u64) -> Vec<(Timestamp, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = EPOCH;
    let mut v = 0.0;
    (0..n)
        .map(|_| {
            t += rng.random_range(5..15);
            v += rng.random_range(-1.0..1.0);
            (t, v)
        })
        .collect()
}

/// A store with `streams` streams of `points` raw points each, not yet downsampled.
pub fn filled_store(streams: usize, points: usize, seed: u64) -> (Datastream, Vec<StreamId>) {
    let store = Datastream::new();
    let ids = (0..streams)
        .map(|i| {
            let id = store
                .ensure_stream(tags([("bench", &i.to_string())]), ValueType::Numeric, Granularity::Seconds10, None)
                .expect("fresh tags");
            for (t, v) in random_series(points, seed + i as u64) {
                store.append(id, t, v).expect("ordered points");
            }
            id
        })
        .collect();
    (store, ids)
}

/// An app with a registered all-push fleet that has reported once.
pub fn reporting_app(nodes: usize) -> Arc<App> {
    let profile = SimNodeProfile {
        count: nodes,
        push_fraction: 1.0,
        down_probability: 0.0,
        modules: ["core.general", "core.resources", "core.interfaces", "core.routing", "core.vpn"]
            .map(String::from)
            .to_vec(),
        ..SimNodeProfile::default()
    };
    let config = ServiceConfig {
        device_dir: concat!(env!("CARGO_MANIFEST_DIR"), "/../../devices").into(),
        fleet: Some(profile.clone()),
        ..ServiceConfig::default()
    };
    let app = Arc::new(App::new(config, Clock::virtual_at(EPOCH)).expect("valid config"));
    let fleet = Fleet::new(profile, PushSink::Hub(app.hub.clone()), "http://127.0.0.1:9");
    fleet.register(&app).expect("fresh node ids");
    fleet.step(EPOCH);
    app
}
