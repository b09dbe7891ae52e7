//! Running the service: the scheduling loop, the HTTP listener, and the
//! virtual-clock simulation.

use std::collections::HashSet;
use std::future::Future;
use std::sync::Arc;
use std::time::{Duration, Instant};

use meshwatch_core::datastream::tags;
use meshwatch_core::monitor::Scheduler;
use meshwatch_core::{Timestamp, Value};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;

use crate::app::{App, AppError, Clock};
use crate::config::{ServiceConfig, SimNodeProfile};
use crate::fleet::{Fleet, PushSink, TruthLog};

/// How often state is written to the data directory while serving.
const SAVE_EVERY_S: i64 = 300;

fn scheduler(app: &App, start: Timestamp) -> Scheduler {
    Scheduler::new(app.pipelines().iter().map(|p| (p.name.as_str(), p.interval_s)), start)
        .expect("pipeline names and intervals were validated with the config")
}

/// Wall-clock loop: steps the fleet, fires due pipelines on blocking
/// threads and expires pool hold-downs, once a second until `stop` resolves.
/// A pipeline whose previous run is still going skips its tick.
pub async fn schedule_loop(app: Arc<App>, fleet: Option<Arc<Fleet>>, stop: impl Future<Output = ()>) {
    let mut sched = scheduler(&app, app.now());
    let running: Arc<Mutex<HashSet<String>>> = Arc::default();
    let mut tick = tokio::time::interval(Duration::from_secs(1));
    tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
    let mut last_save = app.now();
    tokio::pin!(stop);
    loop {
        tokio::select! {
            _ = &mut stop => break,
            _ = tick.tick() => {}
        }
        let now = app.now();
        if let Some(f) = &fleet {
            let f = f.clone();
            if let Err(e) = tokio::task::spawn_blocking(move || f.step(now)).await {
                tracing::error!("fleet step panicked: {e}");
            }
        }
        let fires = sched.poll(now, |name, _| running.lock().contains(name));
        for fire in fires {
            if fire.skipped {
                tracing::warn!(pipeline = %fire.pipeline, at = fire.at, "previous run still in progress; tick skipped");
                continue;
            }
            running.lock().insert(fire.pipeline.clone());
            let (app, running) = (app.clone(), running.clone());
            tokio::task::spawn_blocking(move || {
                if let Some(r) = app.run_pipeline(&fire.pipeline) {
                    tracing::info!(pipeline = %r.pipeline, duration_us = r.duration_us, failures = r.node_failures.len(), "run finished");
                }
                running.lock().remove(&fire.pipeline);
            });
        }
        app.pools.expire_all(now);
        if now - last_save >= SAVE_EVERY_S {
            last_save = now;
            let app = app.clone();
            let _ = tokio::task::spawn_blocking(move || {
                if let Err(e) = app.save() {
                    tracing::error!("saving state failed: {e}");
                }
            })
            .await;
        }
    }
}

/// Serves the API (and the fleet's feeds, if a fleet is configured) on
/// `listener` until `shutdown` resolves, then saves state.
pub async fn serve(
    config: ServiceConfig,
    listener: TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), AppError> {
    let addr = listener.local_addr().map_err(|e| AppError::Setup(e.to_string()))?;
    let app = Arc::new(tokio::task::block_in_place(|| App::new(config, Clock::System))?);
    let fleet = match app.config.fleet.clone() {
        Some(profile) if profile.count > 0 => {
            let f = Arc::new(Fleet::new(profile, PushSink::Hub(app.hub.clone()), &format!("http://{addr}")));
            let new: Vec<_> = f.node_ids().into_iter().filter(|n| !app.db.contains(n)).collect();
            if new.len() == f.node_ids().len() {
                tokio::task::block_in_place(|| f.register(&app))?;
            }
            Some(f)
        }
        _ => None,
    };
    let mut router = crate::api::router(app.clone());
    if let Some(f) = &fleet {
        router = router.merge(f.router());
    }
    let (stop_tx, stop_rx) = tokio::sync::watch::channel(false);
    let loop_handle = {
        let mut rx = stop_rx.clone();
        tokio::spawn(schedule_loop(app.clone(), fleet.clone(), async move {
            let _ = rx.wait_for(|s| *s).await;
        }))
    };
    tracing::info!(%addr, "listening");
    let result = axum::serve(listener, router)
        .with_graceful_shutdown(async move {
            shutdown.await;
            let _ = stop_tx.send(true);
        })
        .await;
    let _ = loop_handle.await;
    tokio::task::block_in_place(|| app.save())?;
    result.map_err(|e| AppError::Setup(e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimRun {
    pub at: Timestamp,
    pub duration_us: u64,
    pub node_failures: usize,
    pub aborted: bool,
    /// Online count the monitoring run wrote to its stream.
    pub online_reported: Option<f64>,
    /// Nodes that were actually up.
    pub online_truth: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub nodes: usize,
    pub push_nodes: usize,
    pub start: Timestamp,
    pub horizon_s: i64,
    pub stale_after_s: i64,
    pub runs: Vec<SimRun>,
    pub max_run_ms: f64,
    /// Runs whose reported online count differs from the truth.
    pub mismatches: usize,
    pub reboots: usize,
    pub streams: usize,
    pub truth: TruthLog,
}

/// Runs the configured fleet against the service on a virtual clock for
/// `horizon_s` seconds starting at the minute containing `start`.
///
/// Pulled agents are served over real HTTP on a loopback port. Staleness is
/// set to the report interval so that a node counts as online exactly when
/// it reported at the tick of the run.
pub fn simulate(mut config: ServiceConfig, start: Timestamp, horizon_s: i64) -> Result<(SimSummary, Arc<App>), AppError> {
    let profile: SimNodeProfile = config.fleet.clone().unwrap_or_default();
    config.stale_after_s = profile.report_interval_s as i64;
    config.data_dir = None;
    let start = start.div_euclid(60) * 60;

    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .map_err(|e| AppError::Setup(e.to_string()))?;
    let listener = rt
        .block_on(TcpListener::bind("127.0.0.1:0"))
        .map_err(|e| AppError::Setup(e.to_string()))?;
    let addr = listener.local_addr().map_err(|e| AppError::Setup(e.to_string()))?;

    let clock = Clock::virtual_at(start);
    let app = Arc::new(App::new(config, clock.clone())?);
    let fleet = Fleet::new(profile, PushSink::Hub(app.hub.clone()), &format!("http://{addr}"));
    fleet.register(&app)?;
    let router = fleet.router();
    rt.spawn(async move {
        let _ = axum::serve(listener, router).await;
    });

    let mut sched = scheduler(&app, start);
    let mut runs = Vec::new();
    for t in start..start + horizon_s {
        clock.set(t);
        fleet.step(t);
        // Runs execute inline, so nothing is ever still running at a tick.
        for fire in sched.poll(t, |_, _| false) {
            let wall = Instant::now();
            let Some(report) = app.run_pipeline(&fire.pipeline) else { continue };
            let duration_us = wall.elapsed().as_micros() as u64;
            runs.push((fire.at, duration_us, report));
        }
        app.pools.expire_all(t);
    }

    let truth = fleet.truth();
    let online_stream = app.streams.find(&tags([("metric", "nodes.online")])).first().map(|m| m.id);
    let points = online_stream.map(|id| app.streams.points(id).unwrap_or_default()).unwrap_or_default();
    let runs: Vec<SimRun> = runs
        .into_iter()
        .map(|(at, duration_us, r)| SimRun {
            at,
            duration_us,
            node_failures: r.node_failures.len(),
            aborted: r.aborted.is_some(),
            online_reported: points.iter().find(|p| p.ts == at).and_then(|p| match p.value {
                Value::Number(v) => Some(v),
                _ => None,
            }),
            online_truth: truth.up_at(at.div_euclid(60) * 60),
        })
        .collect();
    let mismatches = runs
        .iter()
        .filter(|r| r.online_reported.map(|v| v as usize) != r.online_truth || r.online_reported.is_none())
        .count();
    let summary = SimSummary {
        nodes: fleet.node_ids().len(),
        push_nodes: fleet
            .node_ids()
            .iter()
            .filter(|n| fleet.mode_of(n) == Some(meshwatch_core::telemetry::SourceMode::Push))
            .count(),
        start,
        horizon_s,
        stale_after_s: app.config.stale_after_s,
        max_run_ms: runs.iter().map(|r| r.duration_us as f64 / 1000.0).fold(0.0, f64::max),
        mismatches,
        runs,
        reboots: truth.reboots.len(),
        streams: app.streams.len(),
        truth,
    };
    rt.shutdown_timeout(Duration::from_secs(1));
    Ok((summary, app))
}
