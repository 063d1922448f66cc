//! HTTP routes. Every route except `/healthz` requires a bearer token,
//! given as an `Authorization: Bearer` header or a `token` query parameter.

use std::collections::HashMap;
use std::str::FromStr;
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Path, Query, Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Extension, Json, Router};
use geoloop_core::annotations::FeatureState;
use geoloop_core::geo::TileIndex;
use geoloop_core::ids::{AdaptationId, FeatureId, JobId, ModelId, ProjectId, RasterId, SetId};
use geoloop_core::jobs::JobKind;
use geoloop_core::metrics::EvalMode;
use geoloop_core::registry::Task;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::app::{App, NewModel, NewProject, NewSet};
use crate::bus::delivered;
use crate::error::{ServiceError, ServiceResult};
use crate::job_view;
use crate::ws;

/// Caller identity resolved from the bearer token.
#[derive(Debug, Clone)]
pub struct User(pub String);

type AppState = State<Arc<App>>;
type Params = Query<HashMap<String, String>>;

/// JSON request body whose rejections use the error envelope.
pub struct JsonBody<T>(pub T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequest<S> for JsonBody<T> {
    type Rejection = ServiceError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        let bytes = Bytes::from_request(req, state)
            .await
            .map_err(|e| ServiceError::invalid(format!("reading body: {e}")))?;
        serde_json::from_slice(&bytes)
            .map(JsonBody)
            .map_err(|e| ServiceError::invalid(format!("invalid JSON body: {e}")))
    }
}

fn id<T: FromStr>(what: &str, s: &str) -> ServiceResult<T> {
    s.parse().map_err(|_| ServiceError::not_found(what, s))
}

fn param<T: FromStr>(q: &HashMap<String, String>, name: &str) -> ServiceResult<Option<T>>
where
    T::Err: std::fmt::Display,
{
    q.get(name)
        .filter(|v| !v.is_empty())
        .map(|v| v.parse::<T>().map_err(|e| ServiceError::invalid(format!("query parameter {name}: {e}"))))
        .transpose()
}

fn required<T: FromStr>(q: &HashMap<String, String>, name: &str) -> ServiceResult<T>
where
    T::Err: std::fmt::Display,
{
    param(q, name)?.ok_or_else(|| ServiceError::invalid(format!("missing query parameter {name}")))
}

fn tile_param(s: &str) -> ServiceResult<TileIndex> {
    let (c, r) = s.split_once(',').ok_or_else(|| ServiceError::invalid("tile must be col,row"))?;
    let p = |x: &str| x.trim().parse::<u32>().map_err(|_| ServiceError::invalid("tile must be col,row"));
    Ok(TileIndex::new(p(c)?, p(r)?))
}

fn bearer(req: &Request) -> Option<String> {
    if let Some(h) = req.headers().get(header::AUTHORIZATION).and_then(|h| h.to_str().ok()) {
        if let Some(t) = h.strip_prefix("Bearer ") {
            return Some(t.trim().to_string());
        }
    }
    req.uri().query().and_then(|q| {
        q.split('&')
            .filter_map(|kv| kv.split_once('='))
            .find(|(k, _)| *k == "token")
            .map(|(_, v)| v.to_string())
    })
}

async fn auth(State(app): AppState, mut req: Request, next: Next) -> Response {
    let Some(token) = bearer(&req) else {
        return ServiceError::Unauthorized("missing bearer token".into()).into_response();
    };
    let Some(user) = app.user_for(&token) else {
        return ServiceError::Unauthorized("unknown token".into()).into_response();
    };
    req.extensions_mut().insert(User(user.to_string()));
    next.run(req).await
}

pub fn router(app: Arc<App>) -> Router {
    let limit = app.config.max_upload_bytes.saturating_add(64 * 1024);
    let protected = Router::new()
        .route("/api/models", get(list_models).post(create_model))
        .route("/api/models/{id}", get(get_model).delete(delete_model))
        .route("/api/adaptations/{id}", get(get_adaptation))
        .route("/api/projects", get(list_projects).post(create_project))
        .route("/api/projects/{id}", get(get_project))
        .route("/api/projects/{id}/rasters", post(upload_raster))
        .route("/api/rasters/{id}", get(get_raster))
        .route("/tiles/{raster}/{z}/{x}/{y}", get(display_tile))
        .route("/api/sets", get(list_sets).post(create_set))
        .route("/api/sets/{id}", get(get_set))
        .route("/api/sets/{id}/features", get(list_features).post(import_features))
        .route("/api/sets/{id}/features/{fid}/history", get(feature_history))
        .route("/api/sets/{id}/corrections", post(corrections))
        .route("/api/sets/{id}/tiles", get(tile_statuses))
        .route("/api/sets/{id}/tiles/{col}/{row}/reviewed", post(mark_reviewed))
        .route("/api/sets/{id}/merge", post(merge))
        .route("/api/sets/{id}/export.geojson", get(export))
        .route("/api/evaluate", get(evaluate))
        .route("/api/jobs", get(list_jobs).post(submit_job))
        .route("/api/jobs/{id}", get(get_job))
        .route("/api/jobs/{id}/cancel", post(cancel_job))
        .route("/api/events/{topic}", get(read_events))
        .route("/api/admin/snapshot", get(snapshot))
        .route("/api/admin/stats", get(stats))
        .route("/ws", get(ws::client))
        .route("/ws/worker", get(ws::worker))
        .route_layer(middleware::from_fn_with_state(app.clone(), auth));
    Router::new()
        .route("/healthz", get(|| async { Json(json!({ "status": "ok" })) }))
        .merge(protected)
        .fallback(|| async { ServiceError::NotFound("no such route".into()) })
        .layer(DefaultBodyLimit::max(limit))
        .with_state(app)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ServiceResult<T> + Send + 'static) -> ServiceResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Internal(format!("worker thread failed: {e}")))?
}

// Models

async fn list_models(State(app): AppState, q: Params) -> ServiceResult<Json<Value>> {
    let task: Option<Task> = param(&q, "task")?;
    Ok(Json(app.list_models(task)?))
}

async fn create_model(State(app): AppState, JsonBody(m): JsonBody<NewModel>) -> ServiceResult<(StatusCode, Json<Value>)> {
    Ok((StatusCode::CREATED, Json(app.create_model(m)?)))
}

async fn get_model(State(app): AppState, Path(i): Path<String>) -> ServiceResult<Json<Value>> {
    Ok(Json(app.get_model(id::<ModelId>("model", &i)?)?))
}

async fn delete_model(State(app): AppState, Path(i): Path<String>) -> ServiceResult<Json<Value>> {
    Ok(Json(app.delete_model(id::<ModelId>("model", &i)?)?))
}

async fn get_adaptation(State(app): AppState, Path(i): Path<String>) -> ServiceResult<Json<Value>> {
    Ok(Json(json!(app.get_adaptation(id::<AdaptationId>("adaptation", &i)?)?)))
}

// Projects and rasters

async fn list_projects(State(app): AppState) -> ServiceResult<Json<Value>> {
    Ok(Json(app.list_projects()?))
}

async fn create_project(
    State(app): AppState,
    Extension(user): Extension<User>,
    JsonBody(p): JsonBody<NewProject>,
) -> ServiceResult<(StatusCode, Json<Value>)> {
    Ok((StatusCode::CREATED, Json(app.create_project(&user.0, p)?)))
}

async fn get_project(State(app): AppState, Path(i): Path<String>) -> ServiceResult<Json<Value>> {
    Ok(Json(app.get_project(id::<ProjectId>("project", &i)?)?))
}

fn multipart_err(e: axum::extract::multipart::MultipartError) -> ServiceError {
    ServiceError::invalid(format!("multipart upload: {}", e.body_text()))
}

async fn upload_raster(
    State(app): AppState,
    Path(i): Path<String>,
    mut form: Multipart,
) -> ServiceResult<(StatusCode, Json<Value>)> {
    let project = id::<ProjectId>("project", &i)?;
    let cap = app.config.max_upload_bytes;
    let (mut image, mut sidecar, mut name) = (None, None, None);
    while let Some(field) = form.next_field().await.map_err(multipart_err)? {
        let field_name = field.name().unwrap_or_default().to_string();
        let data = field.bytes().await.map_err(multipart_err)?;
        match field_name.as_str() {
            "image" => image = Some(data),
            "sidecar" => sidecar = Some(data),
            "name" => name = Some(String::from_utf8_lossy(&data).into_owned()),
            other => return Err(ServiceError::invalid(format!("unexpected form field {other:?}"))),
        }
    }
    let image = image.ok_or_else(|| ServiceError::invalid("missing form field image"))?;
    let sidecar = sidecar.ok_or_else(|| ServiceError::invalid("missing form field sidecar"))?;
    if image.len() > cap {
        return Err(ServiceError::invalid(format!("upload of {} bytes exceeds the {cap} byte limit", image.len())));
    }
    let (raster, job) = blocking(move || app.upload_raster(project, name, &image, &sidecar)).await?;
    Ok((StatusCode::CREATED, Json(json!({ "raster": raster, "job": job_view(&job) }))))
}

async fn get_raster(State(app): AppState, Path(i): Path<String>) -> ServiceResult<Json<Value>> {
    Ok(Json(app.get_raster(id::<RasterId>("raster", &i)?)?))
}

async fn display_tile(State(app): AppState, Path((r, z, x, y)): Path<(String, String, String, String)>) -> ServiceResult<Response> {
    let raster = id::<RasterId>("raster", &r)?;
    let y = y.strip_suffix(".png").ok_or_else(|| ServiceError::NotFound("tiles are served as .png".into()))?;
    let (z, x, y): (u8, u32, u32) = (id("zoom", &z)?, id("tile column", &x)?, id("tile row", y)?);
    let png = blocking(move || app.display_tile(raster, z, x, y)).await?;
    let mut resp = Response::new(Body::from(png));
    resp.headers_mut().insert(header::CONTENT_TYPE, HeaderValue::from_static("image/png"));
    Ok(resp)
}

// Sets, features, corrections

async fn list_sets(State(app): AppState, q: Params) -> ServiceResult<Json<Value>> {
    Ok(Json(app.list_sets(param(&q, "raster")?)?))
}

async fn create_set(State(app): AppState, JsonBody(s): JsonBody<NewSet>) -> ServiceResult<(StatusCode, Json<Value>)> {
    Ok((StatusCode::CREATED, Json(app.create_set(s)?)))
}

async fn get_set(State(app): AppState, Path(i): Path<String>) -> ServiceResult<Json<Value>> {
    Ok(Json(app.get_set(id::<SetId>("set", &i)?)?))
}

async fn list_features(State(app): AppState, Path(i): Path<String>, q: Params) -> ServiceResult<Json<Value>> {
    let set = id::<SetId>("set", &i)?;
    let state: Option<FeatureState> = param(&q, "state")?;
    let tile = q.get("tile").filter(|t| !t.is_empty()).map(|t| tile_param(t)).transpose()?;
    Ok(Json(json!(blocking(move || app.list_features(set, state, tile)).await?)))
}

async fn import_features(
    State(app): AppState,
    Extension(user): Extension<User>,
    Path(i): Path<String>,
    JsonBody(body): JsonBody<Value>,
) -> ServiceResult<(StatusCode, Json<Value>)> {
    let set = id::<SetId>("set", &i)?;
    let created = blocking(move || app.import_features(&user.0, set, &body)).await?;
    Ok((StatusCode::CREATED, Json(json!(created))))
}

async fn feature_history(State(app): AppState, Path((s, f)): Path<(String, String)>) -> ServiceResult<Json<Value>> {
    let history = app.feature_history(id::<SetId>("set", &s)?, id::<FeatureId>("feature", &f)?)?;
    Ok(Json(json!(history)))
}

/// Body: one Correction, an array of them, or `{"corrections": [...]}`.
async fn corrections(
    State(app): AppState,
    Extension(user): Extension<User>,
    Path(i): Path<String>,
    JsonBody(body): JsonBody<Value>,
) -> ServiceResult<Json<Value>> {
    let set = id::<SetId>("set", &i)?;
    let (items, single) = match body {
        Value::Array(items) => (items, false),
        Value::Object(mut m) if m.contains_key("corrections") => match m.remove("corrections") {
            Some(Value::Array(items)) => (items, false),
            _ => return Err(ServiceError::invalid("corrections must be an array")),
        },
        other @ Value::Object(_) => (vec![other], true),
        _ => return Err(ServiceError::invalid("expected a correction object or array")),
    };
    let mut out = blocking(move || app.apply_corrections(&user.0, set, items)).await?;
    Ok(Json(if single { json!(out.remove(0)) } else { json!(out) }))
}

async fn tile_statuses(State(app): AppState, Path(i): Path<String>) -> ServiceResult<Json<Value>> {
    Ok(Json(app.tile_statuses(id::<SetId>("set", &i)?)?))
}

async fn mark_reviewed(
    State(app): AppState,
    Path((s, c, r)): Path<(String, String, String)>,
) -> ServiceResult<Json<Value>> {
    let set = id::<SetId>("set", &s)?;
    let tile = TileIndex::new(id("tile column", &c)?, id("tile row", &r)?);
    Ok(Json(app.mark_reviewed(set, tile)?))
}

async fn merge(State(app): AppState, Extension(user): Extension<User>, Path(i): Path<String>) -> ServiceResult<Json<Value>> {
    let set = id::<SetId>("set", &i)?;
    let merged = blocking(move || app.merge_border_features(&user.0, set)).await?;
    Ok(Json(json!({ "set_id": set, "merged": merged })))
}

async fn export(State(app): AppState, Path(i): Path<String>, q: Params) -> ServiceResult<Response> {
    let set = id::<SetId>("set", &i)?;
    let states = match q.get("states").filter(|s| !s.is_empty()) {
        Some(s) => Some(
            s.split(',')
                .map(|x| x.trim().parse::<FeatureState>().map_err(ServiceError::Invalid))
                .collect::<ServiceResult<Vec<_>>>()?,
        ),
        None => None,
    };
    let fc = blocking(move || app.export(set, states)).await?;
    let mut resp = Json(fc).into_response();
    resp.headers_mut().insert(header::CONTENT_TYPE, HeaderValue::from_static("application/geo+json"));
    Ok(resp)
}

async fn evaluate(State(app): AppState, q: Params) -> ServiceResult<Json<Value>> {
    let set: SetId = required(&q, "set")?;
    let truth: SetId = required(&q, "truth")?;
    let mode = match q.get("mode").map(String::as_str) {
        None | Some("") | Some("objects") => EvalMode::Objects,
        Some("pixels") => EvalMode::Pixels,
        Some(other) => return Err(ServiceError::invalid(format!("unknown mode {other:?}"))),
    };
    let iou: Option<f64> = param(&q, "iou")?;
    let exclude: Option<SetId> = param(&q, "exclude_reviewed_of")?;
    let report = blocking(move || app.evaluate(set, truth, mode, iou, exclude)).await?;
    Ok(Json(json!(report)))
}

// Jobs and events

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NewJob {
    kind: JobKind,
    #[serde(default)]
    payload: Value,
}

async fn submit_job(State(app): AppState, JsonBody(j): JsonBody<NewJob>) -> ServiceResult<(StatusCode, Json<Value>)> {
    let job = blocking(move || app.submit_job(j.kind, j.payload)).await?;
    Ok((StatusCode::CREATED, Json(job_view(&job))))
}

async fn list_jobs(State(app): AppState, q: Params) -> ServiceResult<Json<Value>> {
    let state = q.get("state").cloned();
    let jobs = app.list_jobs()?;
    let items: Vec<Value> = jobs
        .iter()
        .map(job_view)
        .filter(|j| state.as_deref().is_none_or(|s| j["state"] == s))
        .collect();
    Ok(Json(Value::Array(items)))
}

async fn get_job(State(app): AppState, Path(i): Path<String>) -> ServiceResult<Json<Value>> {
    Ok(Json(job_view(&app.get_job(id::<JobId>("job", &i)?)?)))
}

async fn cancel_job(State(app): AppState, Path(i): Path<String>) -> ServiceResult<Json<Value>> {
    let job = app.orch.cancel(id::<JobId>("job", &i)?)?;
    Ok(Json(job_view(&job)))
}

/// Persisted events of a topic with `seq > after`.
async fn read_events(State(app): AppState, Path(topic): Path<String>, q: Params) -> ServiceResult<Json<Value>> {
    let after: u64 = param(&q, "after")?.unwrap_or(0);
    if !app.store.topic_exists(&topic) {
        if after > 0 {
            return Err(ServiceError::ConflictCode {
                code: "unknown_topic",
                message: format!("cannot resume unknown topic {topic:?}"),
            });
        }
        return Ok(Json(json!({ "topic": topic, "head": 0, "events": [] })));
    }
    let events: Vec<Value> = app
        .store
        .read_topic(&topic, after + 1)
        .iter()
        .map(|(seq, body)| delivered(&topic, *seq, body))
        .collect();
    Ok(Json(json!({ "topic": topic, "head": app.store.topic_head(&topic), "events": events })))
}

async fn snapshot(State(app): AppState) -> ServiceResult<Response> {
    let bytes = blocking(move || {
        let mut out = Vec::new();
        app.store.export_snapshot(&mut out)?;
        Ok(out)
    })
    .await?;
    let mut resp = Response::new(Body::from(bytes));
    resp.headers_mut().insert(header::CONTENT_TYPE, HeaderValue::from_static("application/x-tar"));
    resp.headers_mut().insert(
        header::CONTENT_DISPOSITION,
        HeaderValue::from_static("attachment; filename=\"snapshot.tar\""),
    );
    Ok(resp)
}

async fn stats(State(app): AppState) -> Json<Value> {
    Json(json!({ "orchestrator": app.orch.stats(), "commit_seq": app.store.commit_seq(), "counters": app.counters() }))
}
