//! HTTP front door for the refinement pipeline.
//!
//! | method | path | body |
//! |---|---|---|
//! | POST | `/v1/refine` | multipart: `audio` (WAV), optional `style`, `voice_id`, `force_class`, `use_class_in_prompt` |
//! | GET | `/v1/sessions/{id}` | stored session JSON |
//! | GET | `/v1/sessions/{id}/audio/{input,output}` | WAV |
//! | GET | `/v1/metrics` | latency report over stored sessions |
//! | GET | `/v1/health` | backend reachability |
//!
//! The pipeline is blocking, so every request runs it on the blocking pool.

use std::future::Future;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use anyhow::Context;
use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path as UrlPath, Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::Serialize;
use serde_json::{json, Value};
use speech_refine::audio::load_wav;
use speech_refine::backends::{Backends, StyleSpec};
use speech_refine::config::ServiceConfig;
use speech_refine::pipeline::{
    latency_report, AudioSlot, Pipeline, PipelineError, RefineOptions, RefineRun, SessionStatus, SessionStore,
};
use speech_refine::refine::PromptTemplates;
use speech_refine::sir::{ImpairmentClass, SirModel};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};
use tower_http::trace::TraceLayer;

/// Shared per-process state.
#[derive(Clone)]
pub struct AppState {
    pipeline: Arc<Pipeline>,
    api_token: Option<Arc<str>>,
    default_style: StyleSpec,
}

impl AppState {
    pub fn new(pipeline: Arc<Pipeline>, api_token: Option<String>, default_style: StyleSpec) -> Self {
        Self { pipeline, api_token: api_token.map(Into::into), default_style }
    }

    /// Loads the model, opens the session store and builds the backends.
    ///
    /// HTTP backends use a blocking client; call this outside any async
    /// runtime (or from `spawn_blocking`).
    pub fn from_config(cfg: &ServiceConfig) -> anyhow::Result<Self> {
        let model_path = cfg
            .model_path
            .as_deref()
            .context("model_path is required (set it in the config or SPEECH_REFINE_MODEL_PATH)")?;
        let model = SirModel::load(model_path, &cfg.dsp).with_context(|| format!("loading {}", model_path.display()))?;
        let store = match &cfg.session_dir {
            Some(dir) => SessionStore::open(dir).with_context(|| format!("opening {}", dir.display()))?,
            None => SessionStore::in_memory(),
        };
        let backends = Backends::from_config(&cfg.backends)?;
        let mut pipeline = Pipeline::new(Arc::new(model), &cfg.dsp, backends, Arc::new(store))?
            .with_llm_params(cfg.llm_params);
        if let Some(dir) = cfg.prompts_dir.as_deref() {
            pipeline = pipeline.with_templates(load_templates(dir)?);
        }
        Ok(Self::new(Arc::new(pipeline), cfg.api_token(), cfg.default_style.clone()))
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.pipeline
    }
}

fn load_templates(dir: &Path) -> anyhow::Result<PromptTemplates> {
    PromptTemplates::from_dir(dir).with_context(|| format!("loading prompt templates from {}", dir.display()))
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    kind: String,
    message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    stage: Option<&'static str>,
}

struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, kind: impl Into<String>, message: impl Into<String>) -> Self {
        Self { status, body: ErrorBody { kind: kind.into(), message: message.into(), stage: None } }
    }

    fn ingest(kind: impl Into<String>, message: impl Into<String>) -> Self {
        let mut e = Self::new(StatusCode::BAD_REQUEST, kind, message);
        e.body.stage = Some("ingest");
        e
    }

    fn internal(err: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", err.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.body }))).into_response()
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::AudioTooShort { .. } | PipelineError::AudioTooLong { .. } | PipelineError::Audio(_) => {
                ApiError::ingest(e.kind(), e.to_string())
            }
            other => ApiError::internal(other),
        }
    }
}

/// Builds the router with CORS, request tracing and the optional token check.
pub fn router(state: AppState, cfg: &ServiceConfig) -> Router {
    let cors = if cfg.cors_origins.iter().any(|o| o == "*") {
        CorsLayer::new().allow_origin(Any)
    } else {
        let origins: Vec<HeaderValue> = cfg.cors_origins.iter().filter_map(|o| o.parse().ok()).collect();
        CorsLayer::new().allow_origin(AllowOrigin::list(origins))
    }
    .allow_methods(Any)
    .allow_headers(Any);

    let protected = Router::new()
        .route("/v1/refine", post(refine))
        .route("/v1/sessions/{id}", get(session))
        .route("/v1/sessions/{id}/audio/{slot}", get(session_audio))
        .route("/v1/metrics", get(metrics))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));

    Router::new()
        .route("/v1/health", get(health))
        .merge(protected)
        .layer(DefaultBodyLimit::max(cfg.max_upload_bytes))
        .layer(cors)
        .layer(TraceLayer::new_for_http())
        .with_state(state)
}

fn tokens_match(given: &[u8], expected: &[u8]) -> bool {
    given.len() == expected.len() && given.iter().zip(expected).fold(0u8, |acc, (a, b)| acc | (a ^ b)) == 0
}

async fn require_token(State(state): State<AppState>, req: Request, next: Next) -> Response {
    let Some(expected) = state.api_token.as_deref() else {
        return next.run(req).await;
    };
    let given = req
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .unwrap_or("");
    if tokens_match(given.as_bytes(), expected.as_bytes()) {
        next.run(req).await
    } else {
        ApiError::new(StatusCode::UNAUTHORIZED, "Unauthorized", "missing or invalid bearer token").into_response()
    }
}

async fn health(State(state): State<AppState>) -> Response {
    let pipeline = state.pipeline.clone();
    let probes = tokio::task::spawn_blocking(move || {
        pipeline
            .backends()
            .health()
            .into_iter()
            .map(|(role, h)| (role.to_string(), serde_json::to_value(h).expect("health serialises")))
            .collect::<serde_json::Map<String, Value>>()
    })
    .await;
    match probes {
        Ok(backends) => Json(json!({ "status": "ok", "backends": backends })).into_response(),
        Err(e) => ApiError::internal(e).into_response(),
    }
}

struct RefineForm {
    audio: Bytes,
    options: RefineOptions,
}

fn parse_bool(name: &str, value: &str) -> Result<bool, ApiError> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(ApiError::new(StatusCode::BAD_REQUEST, "InvalidField", format!("{name}: expected true or false, got {other:?}"))),
    }
}

async fn read_form(mut form: Multipart, default_style: &StyleSpec) -> Result<RefineForm, ApiError> {
    let bad = |e: axum::extract::multipart::MultipartError| ApiError::new(e.status(), "InvalidMultipart", e.body_text());
    let mut audio = None;
    let mut options = RefineOptions { style: default_style.clone(), ..RefineOptions::default() };
    while let Some(field) = form.next_field().await.map_err(bad)? {
        let name = field.name().unwrap_or("").to_string();
        match name.as_str() {
            "audio" => audio = Some(field.bytes().await.map_err(bad)?),
            "style" => {
                let text = field.text().await.map_err(bad)?;
                options.style.description = StyleSpec::new(text)
                    .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "InvalidField", e.to_string()))?
                    .description;
            }
            "voice_id" => options.style.voice_id = Some(field.text().await.map_err(bad)?),
            "force_class" => {
                let text = field.text().await.map_err(bad)?;
                let class: ImpairmentClass = text
                    .trim()
                    .parse()
                    .map_err(|_| ApiError::new(StatusCode::BAD_REQUEST, "InvalidField", format!("force_class: unknown class {text:?}")))?;
                options.force_class = Some(class);
            }
            "use_class_in_prompt" => {
                options.use_class_in_prompt = parse_bool(&name, &field.text().await.map_err(bad)?)?;
            }
            _ => {}
        }
    }
    let audio = audio.ok_or_else(|| ApiError::ingest("MissingAudio", "multipart field `audio` is required"))?;
    Ok(RefineForm { audio, options })
}

/// JSON returned by `POST /v1/refine`.
pub fn refine_response(run: &RefineRun) -> Value {
    let s = &run.session;
    let t = &s.timings;
    let impairment = match (&s.impairment, s.impairment_class) {
        (Some(p), _) => json!({ "label": p.label, "probs": p.probs, "forced": false }),
        (None, Some(c)) => json!({ "label": c, "probs": null, "forced": true }),
        (None, None) => Value::Null,
    };
    let mut body = json!({
        "session_id": s.id,
        "status": s.status,
        "impairment": impairment,
        "transcript": s.transcript,
        "refined_text": s.refined_text,
        "audio_wav_base64": run.output_wav.as_ref().map(|w| base64::engine::general_purpose::STANDARD.encode(w)),
        "timings": {
            "ingest_s": t.stages.ingest_s,
            "sir_s": t.stages.sir_s,
            "asr_s": t.stages.asr_s,
            "refine_s": t.stages.refine_s,
            "tts_s": t.stages.tts_s,
            "respond_s": t.stages.respond_s,
            "total_s": t.total_s,
            "audio_duration_s": t.audio_duration_s,
            "rtf": t.rtf,
        },
        "backend_ids": s.backend_ids,
    });
    if let SessionStatus::Failed { stage, kind, error } = &s.status {
        body["error"] = json!({ "kind": kind, "message": error, "stage": stage });
    }
    body
}

async fn refine(State(state): State<AppState>, form: Multipart) -> Result<Response, ApiError> {
    let RefineForm { audio, options } = read_form(form, &state.default_style).await?;
    let clip = load_wav(&audio).map_err(|e| ApiError::ingest(e.kind(), e.to_string()))?;
    let pipeline = state.pipeline.clone();
    let run = tokio::task::spawn_blocking(move || pipeline.refine_speech(&clip, &options))
        .await
        .map_err(ApiError::internal)??;
    let status = if run.session.is_complete() { StatusCode::OK } else { StatusCode::BAD_GATEWAY };
    Ok((status, Json(refine_response(&run))).into_response())
}

fn json_bytes(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], bytes).into_response()
}

async fn session(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    match state.pipeline.store().get_json(&id)? {
        Some(bytes) => Ok(json_bytes(bytes)),
        None => Err(ApiError::new(StatusCode::NOT_FOUND, "NotFound", format!("no session {id}"))),
    }
}

async fn session_audio(
    State(state): State<AppState>,
    UrlPath((id, slot)): UrlPath<(String, String)>,
) -> Result<Response, ApiError> {
    let slot = match slot.as_str() {
        "input" => AudioSlot::Input,
        "output" => AudioSlot::Output,
        _ => return Err(ApiError::new(StatusCode::NOT_FOUND, "NotFound", "audio slot must be input or output")),
    };
    match state.pipeline.store().audio(&id, slot)? {
        Some(wav) => Ok(([(header::CONTENT_TYPE, "audio/wav")], wav).into_response()),
        None => Err(ApiError::new(StatusCode::NOT_FOUND, "NotFound", format!("no audio for session {id}"))),
    }
}

async fn metrics(State(state): State<AppState>) -> Result<Response, ApiError> {
    let pipeline = state.pipeline.clone();
    let sessions = tokio::task::spawn_blocking(move || pipeline.store().list())
        .await
        .map_err(ApiError::internal)??;
    match latency_report(&sessions) {
        Ok(report) => Ok(Json(report).into_response()),
        Err(PipelineError::NoCompleteSessions) => {
            Err(ApiError::new(StatusCode::NOT_FOUND, "NoCompleteSessions", "no complete sessions recorded yet"))
        }
        Err(e) => Err(e.into()),
    }
}

/// Serves on an already-bound listener until `shutdown` resolves; in-flight
/// requests are allowed to finish.
pub async fn serve_on(
    listener: tokio::net::TcpListener,
    state: AppState,
    cfg: &ServiceConfig,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> anyhow::Result<()> {
    let addr = listener.local_addr()?;
    tracing::info!(%addr, "speech-refine server listening");
    axum::serve(listener, router(state, cfg)).with_graceful_shutdown(shutdown).await?;
    tracing::info!("server stopped");
    Ok(())
}

/// Binds `cfg.listen` and serves until Ctrl-C.
pub async fn serve(cfg: ServiceConfig, state: AppState) -> anyhow::Result<()> {
    let addr: SocketAddr = cfg.listen.parse().with_context(|| format!("invalid listen address {:?}", cfg.listen))?;
    let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
    serve_on(listener, state, &cfg, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await
}

/// A server running on its own runtime thread, stopped on drop.
pub struct BackgroundServer {
    addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<anyhow::Result<()>>>,
}

impl BackgroundServer {
    /// Binds `cfg.listen` (port 0 picks a free port) and starts serving.
    pub fn start(state: AppState, cfg: ServiceConfig) -> anyhow::Result<Self> {
        let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
        let listener = rt.block_on(tokio::net::TcpListener::bind(cfg.listen.as_str()))?;
        let addr = listener.local_addr()?;
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let thread = std::thread::Builder::new().name("speech-refine-server".into()).spawn(move || {
            rt.block_on(serve_on(listener, state, &cfg, async {
                let _ = rx.await;
            }))
        })?;
        Ok(Self { addr, shutdown: Some(tx), thread: Some(thread) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Stops accepting, waits for in-flight requests, and joins the thread.
    pub fn stop(mut self) -> anyhow::Result<()> {
        self.shutdown_inner()
    }

    fn shutdown_inner(&mut self) -> anyhow::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().map_err(|_| anyhow::anyhow!("server thread panicked"))?,
            None => Ok(()),
        }
    }
}

impl Drop for BackgroundServer {
    fn drop(&mut self) {
        let _ = self.shutdown_inner();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_comparison() {
        assert!(tokens_match(b"abc", b"abc"));
        assert!(!tokens_match(b"abd", b"abc"));
        assert!(!tokens_match(b"ab", b"abc"));
    }
}
