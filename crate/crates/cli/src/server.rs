//! JSON-over-HTTP front end for [`SessionStore`].

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context as _;
use ardm_core::chat::{ChatConfig, ChatError, ChatTurn, SessionStore};
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::CorsLayer;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub host: String,
    pub port: u16,
    pub chat: ChatConfig,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            host: "127.0.0.1".into(),
            port: 8080,
            chat: ChatConfig::default(),
        }
    }
}

impl ServerConfig {
    /// Reads the JSON file when given, then applies `ARDM_HOST`, `ARDM_PORT`,
    /// `ARDM_CHECKPOINT_DIR`, `ARDM_TRANSCRIPT_DIR` and `ARDM_SEED`.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => ServerConfig::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) -> anyhow::Result<()> {
        if let Some(h) = var("ARDM_HOST") {
            self.host = h;
        }
        if let Some(p) = var("ARDM_PORT") {
            self.port = p.parse().with_context(|| format!("ARDM_PORT {p:?}"))?;
        }
        if let Some(d) = var("ARDM_CHECKPOINT_DIR") {
            self.chat.checkpoint_dir = PathBuf::from(d);
        }
        if let Some(d) = var("ARDM_TRANSCRIPT_DIR") {
            self.chat.transcript_dir = Some(PathBuf::from(d));
        }
        if let Some(s) = var("ARDM_SEED") {
            self.chat.seed = s.parse().with_context(|| format!("ARDM_SEED {s:?}"))?;
        }
        Ok(())
    }

    pub fn addr(&self) -> anyhow::Result<SocketAddr> {
        format!("{}:{}", self.host, self.port)
            .parse()
            .with_context(|| format!("bad listen address {}:{}", self.host, self.port))
    }
}

pub struct ApiError(StatusCode, String);

impl From<ChatError> for ApiError {
    fn from(e: ChatError) -> Self {
        let status = match e {
            ChatError::UnknownSession(_) | ChatError::UnknownCheckpoint(_) => StatusCode::NOT_FOUND,
            ChatError::UnknownPreset(_) | ChatError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ChatError::Busy | ChatError::Full => StatusCode::CONFLICT,
            ChatError::Model(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError(StatusCode::BAD_REQUEST, e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

type Shared = Arc<SessionStore>;
type ApiResult<T> = Result<T, ApiError>;

#[derive(Deserialize)]
pub struct CreateSession {
    pub checkpoint: String,
    #[serde(default = "default_preset")]
    pub preset: String,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_preset() -> String {
    "default".into()
}

#[derive(Deserialize)]
pub struct PostMessage {
    pub text: String,
}

#[derive(Serialize)]
struct History {
    id: String,
    turns: Vec<ChatTurn>,
}

/// Runs model work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ChatError> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(ApiError::from)
}

async fn create(State(store): State<Shared>, body: Result<Json<CreateSession>, JsonRejection>) -> ApiResult<Response> {
    let Json(req) = body?;
    let opened = blocking(move || store.create(&req.checkpoint, &req.preset, req.seed)).await?;
    Ok((StatusCode::CREATED, Json(opened)).into_response())
}

async fn message(
    State(store): State<Shared>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<PostMessage>, JsonRejection>,
) -> ApiResult<Response> {
    let Json(req) = body?;
    // Claimed before queueing so a concurrent post sees the session busy.
    let reservation = store.reserve(&id)?;
    let reply = blocking(move || store.post_reserved(&reservation, &req.text)).await?;
    Ok(Json(reply).into_response())
}

async fn history(State(store): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let turns = store.history(&id)?;
    Ok(Json(History { id, turns }).into_response())
}

async fn export(State(store): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    Ok(Json(store.export(&id)?).into_response())
}

async fn presets(State(store): State<Shared>) -> ApiResult<Response> {
    let presets = store
        .preset_names()
        .iter()
        .map(|n| store.preset(n))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Json(json!({ "presets": presets })).into_response())
}

async fn healthz(State(store): State<Shared>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "sessions": store.session_count() }))
}

pub fn router(store: Shared) -> Router {
    Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{id}/messages", post(message))
        .route("/sessions/{id}/history", get(history))
        .route("/sessions/{id}/export", get(export))
        .route("/presets", get(presets))
        .route("/healthz", get(healthz))
        .layer(CorsLayer::permissive())
        .with_state(store)
}

/// Serves until interrupted.
pub async fn serve(cfg: ServerConfig) -> anyhow::Result<()> {
    let addr = cfg.addr()?;
    let store = Arc::new(SessionStore::new(cfg.chat)?);
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("binding {addr}"))?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(store))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
