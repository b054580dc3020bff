use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::{to_bytes, Body, Bytes, HttpBody};
use axum::extract::multipart::MultipartRejection;
use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::extract::Request;
use axum::middleware::{from_fn, map_response, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use ecgx_core::finetune::{predict, FineTuneConfig, FineTuneMode, MIN_SAMPLES};
use ecgx_exchange::{merge_entries, validate_ident, ExchangeError, RegistryEntry, SyncSummary};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{ApiError, ErrorCode};
use crate::jobs::{JobFailure, JobRecord, JobSpec, JobState, Progress};
use crate::store::{Upload, View};
use crate::App;

type AppState = State<Arc<App>>;
type ApiResult<T> = Result<T, ApiError>;

/// Probability bands for colour coding: below 0.3 is low, 0.7 and above is high.
pub const LOW_BELOW: f64 = 0.3;
pub const HIGH_FROM: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bucket {
    Low,
    Mid,
    High,
}

impl Bucket {
    pub fn of(p: f64) -> Bucket {
        if p < LOW_BELOW {
            Bucket::Low
        } else if p >= HIGH_FROM {
            Bucket::High
        } else {
            Bucket::Mid
        }
    }
}

pub fn router(app: Arc<App>) -> Router {
    let limit = app.config.upload_limit_bytes();
    let api = Router::new()
        .route("/health", get(health))
        .route("/recordings", post(upload_recording).get(list_recordings))
        .route("/recordings/{id}", get(get_recording).delete(delete_recording))
        .route("/recordings/{id}/views/{view}", get(get_view))
        .route("/finetune", post(submit_job).get(list_jobs))
        .route("/finetune/{id}/status", get(job_status))
        .route("/finetune/{id}/report", get(job_report))
        .route("/finetune/{id}/cancel", post(cancel_job))
        .route("/predict", post(predict_table))
        .route("/models", get(list_models))
        .route("/models/sync", post(sync_models))
        .route("/models/{selector}/publish", post(publish_model));
    Router::new()
        .nest("/api/v1", api)
        .fallback(|| async { ApiError::new(ErrorCode::NotFound, "no such endpoint") })
        .layer(DefaultBodyLimit::max(limit))
        .layer(from_fn(move |req, next| reject_oversized(limit, req, next)))
        .layer(map_response(json_errors))
        .with_state(app)
}

/// Gives error responses produced outside the handlers (unknown method, body
/// limit, ...) the same JSON shape as handler errors.
async fn json_errors(resp: Response) -> Response {
    let status = resp.status();
    let is_json = resp
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("application/json"));
    if !(status.is_client_error() || status.is_server_error()) || is_json {
        return resp;
    }
    let text = to_bytes(resp.into_body(), 64 * 1024).await.map(|b| String::from_utf8_lossy(&b).trim().to_string()).unwrap_or_default();
    let code = ErrorCode::for_status(status);
    let message = if text.is_empty() { status.canonical_reason().unwrap_or("error").to_lowercase() } else { text };
    let mut out = ApiError::new(code, message).into_response();
    *out.status_mut() = status;
    out
}

/// Answers 413 for a declared length over the cap. The body is read and discarded
/// first: closing the connection mid-upload would leave the client with a broken
/// pipe instead of the error.
async fn reject_oversized(limit: usize, req: Request, next: Next) -> Response {
    let declared = req.headers().get(header::CONTENT_LENGTH).and_then(|v| v.to_str().ok()).and_then(|v| v.parse::<u64>().ok());
    let Some(len) = declared.filter(|&n| n > limit as u64) else {
        return next.run(req).await;
    };
    // Give up draining bodies far beyond the cap.
    if len <= (limit as u64).saturating_mul(4) {
        let mut body = req.into_body();
        while let Some(Ok(_)) = std::future::poll_fn(|cx| std::pin::Pin::new(&mut body).poll_frame(cx)).await {}
    }
    ApiError::new(ErrorCode::PayloadTooLarge, format!("request body of {len} bytes exceeds the {limit} byte limit")).into_response()
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)?
}

fn parse_json<T: serde::de::DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(ErrorCode::InvalidRequest, format!("request body: {e}")))
}

async fn health(State(app): AppState) -> Json<serde_json::Value> {
    let counts: BTreeMap<JobState, usize> = app.jobs.counts();
    Json(json!({
        "status": "ok",
        "version": env!("CARGO_PKG_VERSION"),
        "workers": app.config.workers,
        "recordings": app.recordings.len(),
        "jobs": counts,
        "registry_configured": app.exchange.is_some(),
    }))
}

/// Labels arrive as a JSON array or a comma-separated list.
fn split_labels(text: &str) -> ApiResult<Vec<String>> {
    let t = text.trim();
    if t.starts_with('[') {
        return serde_json::from_str(t).map_err(|e| ApiError::new(ErrorCode::InvalidRequest, format!("labels: {e}")));
    }
    Ok(t.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect())
}

fn multipart_error(e: impl std::fmt::Display, status: StatusCode) -> ApiError {
    ApiError::new(ErrorCode::for_status(status), format!("multipart body: {e}"))
}

async fn upload_recording(State(app): AppState, mp: Result<Multipart, MultipartRejection>) -> ApiResult<Response> {
    let mut mp = mp.map_err(|e| multipart_error(e.body_text(), e.status()))?;
    let mut up = Upload::default();
    let mut have_file = false;
    while let Some(field) = mp.next_field().await.map_err(|e| multipart_error(e.body_text(), e.status()))? {
        let name = field.name().unwrap_or_default().to_string();
        let filename = field.file_name().map(str::to_string);
        let bytes = field.bytes().await.map_err(|e| multipart_error(e.body_text(), e.status()))?;
        let text = || String::from_utf8_lossy(&bytes).into_owned();
        match name.as_str() {
            "file" => {
                up.filename = filename.unwrap_or_else(|| "upload".into());
                up.bytes = bytes.to_vec();
                have_file = true;
            }
            "signal" => up.signal = Some(bytes.to_vec()),
            "format" => up.format_hint = Some(text().trim().to_lowercase()),
            "rate_hz" => {
                let r: f64 = text().trim().parse().map_err(|_| ApiError::new(ErrorCode::InvalidRequest, "rate_hz must be a number"))?;
                up.rate_hz = Some(r);
            }
            "labels" => up.labels = split_labels(&text())?,
            other => return Err(ApiError::new(ErrorCode::InvalidRequest, format!("unexpected form field {other:?}"))),
        }
    }
    if !have_file {
        return Err(ApiError::new(ErrorCode::InvalidRequest, "missing form field `file`"));
    }
    let meta = blocking(move || app.recordings.ingest(up)).await?;
    Ok((StatusCode::CREATED, Json(meta)).into_response())
}

async fn list_recordings(State(app): AppState) -> Response {
    Json(json!({ "recordings": app.recordings.list() })).into_response()
}

async fn get_recording(State(app): AppState, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(app.recordings.get(&id)?).into_response())
}

async fn delete_recording(State(app): AppState, Path(id): Path<String>) -> ApiResult<StatusCode> {
    blocking(move || app.recordings.delete(&id)).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn get_view(State(app): AppState, Path((id, view)): Path<(String, String)>) -> ApiResult<Response> {
    let v = View::from_name(&view).ok_or_else(|| ApiError::not_found(format!("view {view:?}")))?;
    app.recordings.get(&id)?;
    let body = blocking(move || app.recordings.view(&id, v)).await?;
    Ok(([(header::CONTENT_TYPE, HeaderValue::from_static("application/json"))], Body::from(body.as_ref().clone())).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum LabelCell {
    One(String),
    Many(Vec<String>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SubmitRequest {
    /// Base model name.
    model: String,
    /// Name for the trained model; generated when absent.
    #[serde(default)]
    name: Option<String>,
    recordings: Vec<String>,
    /// One entry per recording; defaults to the labels stored at upload.
    #[serde(default)]
    labels: Option<Vec<LabelCell>>,
    #[serde(default)]
    config: serde_json::Value,
}

/// Client-facing view of a job.
#[derive(Debug, Serialize)]
struct JobStatus<'a> {
    id: &'a str,
    state: JobState,
    base_model: &'a str,
    name: &'a str,
    n_recordings: usize,
    progress: Progress,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<&'a JobFailure>,
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<&'a str>,
    interrupted_by_restart: bool,
    created_at: DateTime<Utc>,
    updated_at: DateTime<Utc>,
}

fn status_of(j: &JobRecord) -> JobStatus<'_> {
    JobStatus {
        id: &j.id,
        state: j.state,
        base_model: &j.spec.model,
        name: &j.spec.name,
        n_recordings: j.spec.recordings.len(),
        progress: j.progress,
        error: j.error.as_ref(),
        model: j.model_stem.as_deref(),
        interrupted_by_restart: j.interrupted_by_restart,
        created_at: j.created_at,
        updated_at: j.updated_at,
    }
}

fn check_labels(labels: &[Vec<String>]) -> ApiResult<()> {
    let invalid = |msg: String, cause: &str| Err(ApiError::new(ErrorCode::LabelValidation, msg).caused_by(cause));
    if labels.len() < MIN_SAMPLES {
        return invalid(format!("need at least {MIN_SAMPLES} labelled recordings, got {}", labels.len()), "too_few_samples");
    }
    if let Some(i) = labels.iter().position(|l| l.is_empty()) {
        return invalid(format!("recording #{i} has no label"), "missing_label");
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for row in labels {
        for l in row {
            *counts.entry(l.as_str()).or_default() += 1;
        }
    }
    if counts.len() < 2 {
        return invalid(format!("labels must cover at least 2 classes, got {}", counts.len()), "too_few_classes");
    }
    if let Some((c, n)) = counts.iter().find(|(_, &n)| n < 2) {
        return invalid(format!("class {c:?} has {n} recording(s); at least 2 are needed"), "class_too_small");
    }
    Ok(())
}

async fn submit_job(State(app): AppState, body: Bytes) -> ApiResult<Response> {
    let req: SubmitRequest = parse_json(&body)?;
    blocking(move || {
        if req.model.trim().is_empty() {
            return Err(ApiError::new(ErrorCode::InvalidRequest, "model must name a base model"));
        }
        let name = req.name.unwrap_or_else(|| format!("finetuned-{}", &uuid::Uuid::new_v4().simple().to_string()[..8]));
        validate_ident("name", &name).map_err(|e| ApiError::new(ErrorCode::InvalidRequest, e.to_string()))?;
        let config: FineTuneConfig = if req.config.is_null() {
            FineTuneConfig::default()
        } else {
            serde_json::from_value(req.config).map_err(|e| ApiError::new(ErrorCode::InvalidConfig, format!("config: {e}")))?
        };
        config.validate().map_err(|e| ApiError::new(ErrorCode::InvalidConfig, e.to_string()).caused_by(e.code()))?;
        if config.mode == FineTuneMode::Full {
            return Err(ApiError::new(ErrorCode::InvalidConfig, "only the classification head can be trained").caused_by("unsupported_at_desk_scale"));
        }
        let metas = req.recordings.iter().map(|id| app.recordings.get(id)).collect::<ApiResult<Vec<_>>>()?;
        let labels: Vec<Vec<String>> = match req.labels {
            Some(cells) => {
                if cells.len() != metas.len() {
                    return Err(ApiError::new(
                        ErrorCode::LabelValidation,
                        format!("{} label entries for {} recordings", cells.len(), metas.len()),
                    )
                    .caused_by("shape_mismatch"));
                }
                cells
                    .into_iter()
                    .map(|c| match c {
                        LabelCell::One(s) => vec![s],
                        LabelCell::Many(v) => v,
                    })
                    .map(|row| row.into_iter().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect())
                    .collect()
            }
            None => metas.iter().map(|m| m.labels.clone()).collect(),
        };
        check_labels(&labels)?;
        let _guard = app.submit_lock.lock();
        let exists = match app.models.find(&name) {
            Ok(_) => true,
            Err(ExchangeError::NotFound(_)) => false,
            Err(e) => return Err(e.into()),
        };
        if exists || app.jobs.name_taken(&name) {
            return Err(ApiError::new(ErrorCode::Conflict, format!("a model named {name:?} already exists")));
        }
        let spec = JobSpec { model: req.model, name, recordings: req.recordings, labels, config };
        let job = app.jobs.submit(spec)?;
        Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": job.id, "state": job.state, "name": job.spec.name }))).into_response())
    })
    .await
}

async fn list_jobs(State(app): AppState) -> Response {
    let jobs = app.jobs.list();
    Json(json!({ "jobs": jobs.iter().map(|j| status_of(j)).collect::<Vec<_>>() })).into_response()
}

fn job(app: &App, id: &str) -> ApiResult<Arc<JobRecord>> {
    app.jobs.get(id).ok_or_else(|| ApiError::not_found(format!("job {id}")))
}

async fn job_status(State(app): AppState, Path(id): Path<String>) -> ApiResult<Response> {
    let j = job(&app, &id)?;
    Ok(Json(status_of(&j)).into_response())
}

async fn job_report(State(app): AppState, Path(id): Path<String>) -> ApiResult<Response> {
    let j = job(&app, &id)?;
    match (&j.state, &j.report) {
        (JobState::Succeeded, Some(r)) => Ok(Json(r).into_response()),
        (state, _) => Err(ApiError::new(ErrorCode::NotReady, format!("job {id} is {}; the report exists once it succeeds", json!(state).as_str().unwrap_or("?")))),
    }
}

async fn cancel_job(State(app): AppState, Path(id): Path<String>) -> ApiResult<Response> {
    let j = app.jobs.cancel(&id)?;
    Ok(Json(status_of(&j)).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictRequest {
    recordings: Vec<String>,
    /// `name` or `name@version`.
    model: String,
}

#[derive(Debug, Serialize)]
struct PredictRow {
    recording_id: String,
    probabilities: Vec<f64>,
    buckets: Vec<Bucket>,
    predicted: String,
}

async fn predict_table(State(app): AppState, body: Bytes) -> ApiResult<Response> {
    let req: PredictRequest = parse_json(&body)?;
    blocking(move || {
        if req.recordings.is_empty() {
            return Err(ApiError::new(ErrorCode::InvalidRequest, "no recordings given"));
        }
        let (manifest, head) = app.models.load_head(&req.model).map_err(|e| match e {
            ExchangeError::NotExecutable(kind) => ApiError::new(
                ErrorCode::NotExecutable,
                format!("model {} is an {kind} model, which can be exchanged but not run by this service; pick a linear_head or mlp model", req.model),
            )
            .caused_by("not_executable"),
            ExchangeError::NotFound(_) => ApiError::not_found(format!("model {}", req.model)),
            other => other.into(),
        })?;
        let embeddings = req.recordings.iter().map(|id| app.recordings.embedding(id).map(|e| e.to_vec())).collect::<ApiResult<Vec<_>>>()?;
        let probs = predict(&head, &embeddings).map_err(|e| ApiError::new(ErrorCode::InvalidRequest, e.to_string()).caused_by(e.code()))?;
        let classes = head.class_names().to_vec();
        let rows: Vec<PredictRow> = req
            .recordings
            .into_iter()
            .zip(probs)
            .map(|(id, p)| {
                let best = p.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map_or(0, |(i, _)| i);
                PredictRow { recording_id: id, buckets: p.iter().map(|&v| Bucket::of(v)).collect(), predicted: classes[best].clone(), probabilities: p }
            })
            .collect();
        Ok(Json(json!({
            "model": manifest.stem(),
            "activation": head.activation().name(),
            "class_names": classes,
            "thresholds": { "low_below": LOW_BELOW, "high_from": HIGH_FROM },
            "rows": rows,
        }))
        .into_response())
    })
    .await
}

#[derive(Debug, Serialize)]
struct ModelList {
    configured: bool,
    /// True when the registry could not be reached and only cached entries are shown.
    degraded: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<crate::error::ErrorDetail>,
    models: Vec<RegistryEntry>,
    warnings: Vec<String>,
}

async fn list_models(State(app): AppState) -> ApiResult<Response> {
    blocking(move || {
        let local = app.models.models()?;
        let (remote, error) = match &app.exchange {
            Some(c) => match ecgx_exchange::list_remote(c) {
                Ok(l) => (Some(l), None),
                Err(e) => (None, Some(ApiError::from(e).body().error)),
            },
            None => (None, None),
        };
        let models = merge_entries(&local, remote.as_ref(), &app.publishing());
        let body = ModelList {
            configured: app.exchange.is_some(),
            degraded: error.is_some(),
            error,
            warnings: remote.map(|r| r.warnings).unwrap_or_default(),
            models,
        };
        Ok(Json(body).into_response())
    })
    .await
}

fn registry(app: &App) -> ApiResult<&ecgx_exchange::WebDavClient> {
    app.exchange.as_ref().ok_or_else(|| ApiError::new(ErrorCode::RegistryNotConfigured, "no model registry is configured (set EXCHANGE_URL)"))
}

async fn sync_models(State(app): AppState) -> ApiResult<Response> {
    blocking(move || {
        let summary: SyncSummary = app.models.sync(registry(&app)?)?;
        Ok(Json(summary).into_response())
    })
    .await
}

async fn publish_model(State(app): AppState, Path(selector): Path<String>) -> ApiResult<Response> {
    blocking(move || {
        let client = registry(&app)?;
        let model = app.models.find(&selector).map_err(|e| match e {
            ExchangeError::NotFound(_) => ApiError::not_found(format!("model {selector}")),
            other => other.into(),
        })?;
        let stem = model.manifest.stem();
        let path = app.while_publishing(&stem, || app.models.publish(client, &stem))?;
        Ok((StatusCode::CREATED, Json(json!({ "model": stem, "path": path }))).into_response())
    })
    .await
}
