//! HTTP routes.

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use meshwatch_core::firmware::BuildState;
use meshwatch_core::registry::{ConfigDocument, FormContext, CONFIG_POINT, MONITORING_POINT};
use meshwatch_core::telemetry::PushOutcome;
use meshwatch_core::{Granularity, IpPrefix, NodeId};
use serde::Deserialize;
use serde_json::{json, Value as JsonValue};

use crate::app::{App, NewNode};
use crate::error::ApiError;

type Shared = Arc<App>;
type ApiResult<T> = Result<T, ApiError>;

pub fn router(app: Shared) -> Router {
    Router::new()
        .route("/api/nodes", get(list_nodes).post(create_node))
        .route("/api/nodes/{uuid}", get(get_node))
        .route("/api/nodes/{uuid}/config", get(get_config).put(put_config))
        .route("/api/nodes/{uuid}/config/validate", post(validate_config))
        .route("/api/nodes/{uuid}/config/defaults", post(config_defaults))
        .route("/api/nodes/{uuid}/state", get(get_state))
        .route("/api/nodes/{uuid}/telemetry", get(get_telemetry))
        .route("/api/nodes/{uuid}/build/{platform}", post(start_build))
        .route("/api/form-schema/{point}", get(form_schema))
        .route("/api/devices", get(list_devices))
        .route("/api/builds", get(list_builds))
        .route("/api/builds/{id}", get(get_build))
        .route("/api/builds/{id}/download", get(download_build))
        .route("/api/streams", get(find_streams))
        .route("/api/streams/{id}/datapoints", get(datapoints))
        .route("/api/runs", get(list_runs))
        .route("/api/pipelines/{name}/run", post(run_now))
        .route("/api/pools", get(list_pools))
        .route("/api/pools/{id}/allocate", post(allocate))
        .route("/api/pools/{id}/free", post(free))
        .route("/api/telemetry/events", get(telemetry_events))
        .route("/push/http", post(push))
        .with_state(app)
}

fn parse_uuid(s: &str) -> ApiResult<NodeId> {
    s.parse().map_err(|_| ApiError::bad_request("invalid-uuid", format!("`{s}` is not a uuid")))
}

fn parse_json<T: for<'de> Deserialize<'de>>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request("malformed-json", e.to_string()))
}

fn known_node(app: &App, s: &str) -> ApiResult<NodeId> {
    let uuid = parse_uuid(s)?;
    if app.db.contains(&uuid) {
        Ok(uuid)
    } else {
        Err(ApiError::new(StatusCode::NOT_FOUND, "unknown-node", format!("node {uuid} does not exist")))
    }
}

#[derive(Deserialize)]
struct NodeFilter {
    q: Option<String>,
    point: Option<String>,
}

async fn list_nodes(State(app): State<Shared>, Query(f): Query<NodeFilter>) -> ApiResult<impl IntoResponse> {
    let point = f.point.as_deref().unwrap_or(CONFIG_POINT);
    let nodes = app.list_nodes(f.q.as_deref().map(|q| (point, q)))?;
    Ok(Json(nodes))
}

async fn create_node(State(app): State<Shared>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let req: NewNode = parse_json(&body)?;
    let created = app.create_node(req)?;
    Ok((StatusCode::CREATED, Json(created)))
}

async fn get_node(State(app): State<Shared>, Path(uuid): Path<String>) -> ApiResult<impl IntoResponse> {
    let uuid = known_node(&app, &uuid)?;
    let record = app.db.node(&uuid).ok_or_else(|| ApiError::not_found(uuid.to_string()))?;
    Ok(Json(json!({
        "uuid": record.uuid,
        "created_at": record.created_at,
        "documents": record.documents,
        "telemetry": app.hub.source(&uuid),
    })))
}

async fn get_config(State(app): State<Shared>, Path(uuid): Path<String>) -> ApiResult<impl IntoResponse> {
    let uuid = known_node(&app, &uuid)?;
    Ok(Json(app.db.get_config(&uuid).map_err(crate::app::AppError::from)?))
}

async fn put_config(State(app): State<Shared>, Path(uuid): Path<String>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let uuid = known_node(&app, &uuid)?;
    let doc: ConfigDocument = parse_json(&body)?;
    app.set_config(&uuid, doc)?;
    Ok(Json(app.db.get_config(&uuid).map_err(crate::app::AppError::from)?))
}

/// Schema check plus transformation dry run, without storing anything.
async fn validate_config(
    State(app): State<Shared>,
    Path(uuid): Path<String>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    known_node(&app, &uuid)?;
    let doc: ConfigDocument = parse_json(&body)?;
    let mut issues = doc.validate(&app.registry, CONFIG_POINT);
    if issues.is_empty() {
        issues = app.gate(&doc);
    }
    Ok(Json(json!({ "valid": issues.is_empty(), "issues": issues })))
}

#[derive(Deserialize)]
struct SessionQuery {
    session: Option<String>,
}

async fn config_defaults(
    State(app): State<Shared>,
    Path(uuid): Path<String>,
    Query(s): Query<SessionQuery>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let uuid = known_node(&app, &uuid)?;
    let doc: ConfigDocument = parse_json(&body)?;
    let (config, issues) = app.form_defaults(&uuid, s.session.as_deref().unwrap_or("default"), doc)?;
    Ok(Json(json!({ "config": config, "issues": issues })))
}

async fn get_state(State(app): State<Shared>, Path(uuid): Path<String>) -> ApiResult<impl IntoResponse> {
    let uuid = known_node(&app, &uuid)?;
    Ok(Json(app.db.document(&uuid, MONITORING_POINT).map_err(crate::app::AppError::from)?))
}

/// The latest received document and the monitoring items staged from it.
async fn get_telemetry(State(app): State<Shared>, Path(uuid): Path<String>) -> ApiResult<impl IntoResponse> {
    let uuid = known_node(&app, &uuid)?;
    let (received, dispatch) =
        app.hub.staged(&uuid).ok_or_else(|| ApiError::not_found(format!("no telemetry from {uuid} yet")))?;
    Ok(Json(json!({
        "received_at": received.received_at,
        "via": received.via,
        "document": received.doc.to_json(),
        "staged": dispatch,
    })))
}

async fn start_build(
    State(app): State<Shared>,
    Path((uuid, platform)): Path<(String, String)>,
) -> ApiResult<impl IntoResponse> {
    let uuid = known_node(&app, &uuid)?;
    let id = app.build(&uuid, &platform)?;
    Ok((StatusCode::ACCEPTED, Json(json!({ "build_id": id }))))
}

async fn form_schema(
    State(app): State<Shared>,
    Path(point): Path<String>,
    Query(ctx): Query<FormContext>,
) -> ApiResult<impl IntoResponse> {
    let schema = app.registry.form_schema(&point, ctx).map_err(|e| ApiError::not_found(e.to_string()))?;
    Ok(Json(schema))
}

async fn list_devices(State(app): State<Shared>) -> impl IntoResponse {
    Json(app.devices.all())
}

async fn list_builds(State(app): State<Shared>) -> impl IntoResponse {
    Json(app.builds.jobs())
}

fn build_id(s: &str) -> ApiResult<u64> {
    s.parse().map_err(|_| ApiError::bad_request("invalid-id", format!("`{s}` is not a build id")))
}

async fn get_build(State(app): State<Shared>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let id = build_id(&id)?;
    app.builds.job(id).map(Json).ok_or_else(|| ApiError::not_found(format!("build {id}")))
}

async fn download_build(State(app): State<Shared>, Path(id): Path<String>) -> ApiResult<Response> {
    let id = build_id(&id)?;
    let job = app.builds.job(id).ok_or_else(|| ApiError::not_found(format!("build {id}")))?;
    let BuildState::Done { bundle } = job.state else {
        return Err(ApiError::new(StatusCode::CONFLICT, "not-ready", format!("build {id} has not finished")));
    };
    let archive = app
        .builds
        .artifact(&bundle.digest)
        .ok_or_else(|| ApiError::not_found(format!("artifact {}", bundle.digest)))?;
    let name = format!("attachment; filename=\"{}-{}.tar\"", job.node, &bundle.digest[..12]);
    Ok((
        [(header::CONTENT_TYPE, "application/x-tar".to_string()), (header::CONTENT_DISPOSITION, name)],
        archive.as_ref().clone(),
    )
        .into_response())
}

/// `?tags.metric=uptime&tags.node=...`; every given tag must match.
async fn find_streams(
    State(app): State<Shared>,
    Query(params): Query<BTreeMap<String, String>>,
) -> ApiResult<impl IntoResponse> {
    let mut tags = BTreeMap::new();
    for (k, v) in params {
        let Some(tag) = k.strip_prefix("tags.") else {
            return Err(ApiError::bad_request("invalid-query", format!("unknown parameter `{k}`")));
        };
        tags.insert(tag.to_string(), v);
    }
    Ok(Json(app.streams.find(&tags)))
}

#[derive(Deserialize)]
struct DatapointQuery {
    granularity: Option<String>,
    from: Option<i64>,
    to: Option<i64>,
}

async fn datapoints(
    State(app): State<Shared>,
    Path(id): Path<String>,
    Query(q): Query<DatapointQuery>,
) -> ApiResult<impl IntoResponse> {
    let id: u64 = id.parse().map_err(|_| ApiError::bad_request("invalid-id", format!("`{id}` is not a stream id")))?;
    let meta = app.streams.meta(id).map_err(|e| ApiError::not_found(e.to_string()))?;
    let granularity = match q.granularity {
        Some(g) => g.parse::<Granularity>().map_err(|e| ApiError::bad_request("invalid-granularity", e.to_string()))?,
        None => meta.highest_granularity,
    };
    let series = app
        .streams
        .query(id, granularity, q.from.unwrap_or(i64::MIN), q.to.unwrap_or(i64::MAX))
        .map_err(|e| ApiError::bad_request("invalid-query", e.to_string()))?;
    Ok(Json(json!({ "stream": meta, "granularity": granularity, "datapoints": series })))
}

#[derive(Deserialize)]
struct RunQuery {
    pipeline: Option<String>,
    limit: Option<usize>,
}

async fn list_runs(State(app): State<Shared>, Query(q): Query<RunQuery>) -> impl IntoResponse {
    Json(app.runs(q.pipeline.as_deref(), q.limit.unwrap_or(50)))
}

/// Runs a pipeline immediately instead of waiting for its next tick.
async fn run_now(State(app): State<Shared>, Path(name): Path<String>) -> ApiResult<impl IntoResponse> {
    let report = tokio::task::spawn_blocking(move || app.run_pipeline(&name).ok_or(name))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(|name| ApiError::not_found(format!("pipeline `{name}`")))?;
    Ok(Json(report))
}

async fn list_pools(State(app): State<Shared>) -> impl IntoResponse {
    let pools: Vec<JsonValue> = app
        .pools
        .snapshot()
        .into_iter()
        .map(|p| {
            let allocations: Vec<_> = p.allocations().cloned().collect();
            json!({ "id": p.id, "root": p.root, "holddown_s": p.holddown_secs, "allocations": allocations })
        })
        .collect();
    Json(pools)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AllocateRequest {
    prefix_length: u8,
    node: NodeId,
}

async fn allocate(State(app): State<Shared>, Path(id): Path<String>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let req: AllocateRequest = parse_json(&body)?;
    let allocation = app.allocate(&id, req.prefix_length, req.node)?;
    Ok((StatusCode::CREATED, Json(allocation)))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FreeRequest {
    prefix: IpPrefix,
}

async fn free(State(app): State<Shared>, Path(id): Path<String>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let req: FreeRequest = parse_json(&body)?;
    app.free(&id, req.prefix)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn telemetry_events(State(app): State<Shared>) -> impl IntoResponse {
    Json(json!({ "events": app.hub.events(), "quarantined": app.hub.quarantined() }))
}

/// Node push endpoint: 200 when accepted, 202 when held for an unknown node.
async fn push(State(app): State<Shared>, headers: HeaderMap, body: Bytes) -> ApiResult<impl IntoResponse> {
    let auth = headers.get(header::AUTHORIZATION).and_then(|v| v.to_str().ok());
    let outcome = app.hub.ingest_push(&body, auth, app.now())?;
    let status = match outcome {
        PushOutcome::Accepted => StatusCode::OK,
        PushOutcome::Quarantined => StatusCode::ACCEPTED,
    };
    Ok((status, Json(json!({ "status": outcome }))))
}
