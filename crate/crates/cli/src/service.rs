//! JSON-over-HTTP session service for the chat console.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::{Path, State};
use axum::http::{HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use npc_dialogue::backend::Generator;
use npc_dialogue::context::{load_dataset, Conversation, Turn};
use npc_dialogue::registry::Registry;
use npc_dialogue::router::{RunSettings, Session, TurnError};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::CorsLayer;
use uuid::Uuid;

use crate::commands::{load_backend, load_settings};
use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    pub backend: PathBuf,
    pub registry: PathBuf,
    pub dataset: PathBuf,
    #[serde(default = "default_ttl")]
    pub session_ttl_secs: u64,
    #[serde(default)]
    pub cors_origins: Vec<String>,
    #[serde(default)]
    pub settings: Option<PathBuf>,
}

fn default_listen() -> String {
    "127.0.0.1:8080".into()
}

fn default_ttl() -> u64 {
    1800
}

impl ServiceConfig {
    pub fn load(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::new("service_config", format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::new("service_config", format!("{}: {e}", path.display())))
    }

    fn check_paths(&self) -> Result<(), CliError> {
        let mut paths = vec![("backend", &self.backend), ("registry", &self.registry), ("dataset", &self.dataset)];
        if let Some(settings) = &self.settings {
            paths.push(("settings", settings));
        }
        for (field, path) in paths {
            if !path.exists() {
                return Err(CliError::new(
                    "service_config",
                    format!("{field} path {} does not exist", path.display()),
                ));
            }
        }
        Ok(())
    }
}

struct SessionSlot {
    conversation_id: String,
    /// Held only while a turn runs; the transcript copy below serves reads.
    session: Mutex<Session>,
    transcript: Mutex<Vec<Turn>>,
    in_flight: AtomicBool,
    last_used: Mutex<Instant>,
}

impl SessionSlot {
    fn touch(&self) {
        *self.last_used.lock().expect("clock lock poisoned") = Instant::now();
    }

    fn expired(&self, ttl: Duration) -> bool {
        !self.in_flight.load(Ordering::Acquire) && self.last_used.lock().expect("clock lock poisoned").elapsed() > ttl
    }
}

/// Clears the in-flight flag however the turn ends.
struct InFlight<'a>(&'a AtomicBool);

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.store(false, Ordering::Release);
    }
}

pub struct AppState {
    conversations: Vec<Conversation>,
    registry: Arc<Registry>,
    backend: Arc<dyn Generator>,
    settings: RunSettings,
    ttl: Duration,
    sessions: Mutex<HashMap<Uuid, Arc<SessionSlot>>>,
}

impl AppState {
    pub fn new(
        conversations: Vec<Conversation>,
        registry: Arc<Registry>,
        backend: Arc<dyn Generator>,
        settings: RunSettings,
        ttl: Duration,
    ) -> Self {
        Self {
            conversations,
            registry,
            backend,
            settings,
            ttl,
            sessions: Mutex::new(HashMap::new()),
        }
    }

    pub fn from_config(config: &ServiceConfig) -> Result<Self, CliError> {
        config.check_paths()?;
        Ok(Self::new(
            load_dataset(&config.dataset)?,
            Arc::new(Registry::load(&config.registry)?),
            load_backend(&config.backend)?,
            load_settings(config.settings.as_deref())?,
            Duration::from_secs(config.session_ttl_secs),
        ))
    }

    /// Drops sessions idle for longer than the TTL. Returns how many went.
    pub fn evict_expired(&self) -> usize {
        let mut sessions = self.sessions.lock().expect("session map poisoned");
        let before = sessions.len();
        sessions.retain(|_, slot| !slot.expired(self.ttl));
        before - sessions.len()
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session map poisoned").len()
    }

    fn slot(&self, id: &str) -> Result<Arc<SessionSlot>, ApiError> {
        let unknown = || ApiError::not_found(format!("unknown session {id:?}"));
        let id = Uuid::parse_str(id).map_err(|_| unknown())?;
        let mut sessions = self.sessions.lock().expect("session map poisoned");
        match sessions.get(&id) {
            Some(slot) if slot.expired(self.ttl) => {
                sessions.remove(&id);
                Err(unknown())
            }
            Some(slot) => Ok(slot.clone()),
            None => Err(unknown()),
        }
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: serde_json::Value,
}

impl ApiError {
    fn new(status: StatusCode, kind: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({ "error": { "kind": kind, "message": message.into() } }),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<TurnError> for ApiError {
    fn from(err: TurnError) -> Self {
        match &err {
            TurnError::EmptyQuery => Self::new(StatusCode::BAD_REQUEST, "empty_query", err.to_string()),
            TurnError::Backend { stage, source } => Self {
                status: StatusCode::BAD_GATEWAY,
                body: json!({ "error": {
                    "kind": "backend",
                    "message": err.to_string(),
                    "stage": stage,
                    "adapter": source.adapter,
                    "detail": source.kind,
                }}),
            },
            TurnError::Internal(_) => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", err.to_string()),
        }
    }
}

#[derive(Debug, Deserialize)]
struct CreateSession {
    conversation_id: String,
}

#[derive(Debug, Deserialize)]
struct PostTurn {
    query: String,
}

fn background_summary(conv: &Conversation) -> serde_json::Value {
    let bg = &conv.background;
    json!({
        "persona": { "name": bg.persona.name, "occupation": bg.persona.occupation },
        "role": bg.role,
        "state": bg.state,
        "function_list_id": conv.function_list_id,
    })
}

async fn list_conversations(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let listing: Vec<_> = state
        .conversations
        .iter()
        .map(|c| json!({ "id": c.id, "background": background_summary(c) }))
        .collect();
    Json(json!({ "conversations": listing }))
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    Json(body): Json<CreateSession>,
) -> Result<(StatusCode, Json<serde_json::Value>), ApiError> {
    let conv = state
        .conversations
        .iter()
        .find(|c| c.id == body.conversation_id)
        .ok_or_else(|| ApiError::not_found(format!("unknown conversation {:?}", body.conversation_id)))?;
    let mut fresh = conv.clone();
    fresh.turns.clear();
    let session = Session::new(fresh, state.backend.clone(), state.registry.clone(), state.settings.clone())
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_conversation", e.to_string()))?;
    let id = Uuid::new_v4();
    let slot = SessionSlot {
        conversation_id: conv.id.clone(),
        session: Mutex::new(session),
        transcript: Mutex::new(Vec::new()),
        in_flight: AtomicBool::new(false),
        last_used: Mutex::new(Instant::now()),
    };
    state
        .sessions
        .lock()
        .expect("session map poisoned")
        .insert(id, Arc::new(slot));
    Ok((
        StatusCode::CREATED,
        Json(json!({
            "session_id": id,
            "conversation_id": conv.id,
            "background": background_summary(conv),
        })),
    ))
}

async fn post_turn(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(body): Json<PostTurn>,
) -> Result<Response, ApiError> {
    let slot = state.slot(&id)?;
    if slot
        .in_flight
        .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
        .is_err()
    {
        return Err(ApiError::new(StatusCode::CONFLICT, "turn_in_flight", "a turn is already running for this session"));
    }
    let worker = slot.clone();
    let outcome = tokio::task::spawn_blocking(move || {
        let _guard = InFlight(&worker.in_flight);
        let mut session = worker.session.lock().expect("session poisoned");
        let result = session.run_turn(&body.query);
        if result.is_ok() {
            *worker.transcript.lock().expect("transcript poisoned") = session.conversation().turns.clone();
        }
        worker.touch();
        result
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    Ok(Json(outcome).into_response())
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let slot = state.slot(&id)?;
    slot.touch();
    let turns = slot.transcript.lock().expect("transcript poisoned").clone();
    Ok(Json(json!({
        "session_id": id,
        "conversation_id": slot.conversation_id,
        "in_flight": slot.in_flight.load(Ordering::Acquire),
        "turns": turns,
    }))
    .into_response())
}

async fn delete_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    state.slot(&id)?;
    let uuid = Uuid::parse_str(&id).expect("slot lookup validated the id");
    state.sessions.lock().expect("session map poisoned").remove(&uuid);
    Ok(StatusCode::NO_CONTENT)
}

pub fn router(state: Arc<AppState>, cors_origins: &[String]) -> Result<Router, CliError> {
    let app = Router::new()
        .route("/api/conversations", get(list_conversations))
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/:id", get(get_session).delete(delete_session))
        .route("/api/sessions/:id/turns", post(post_turn))
        .with_state(state);
    if cors_origins.is_empty() {
        return Ok(app);
    }
    let origins = cors_origins
        .iter()
        .map(|o| HeaderValue::from_str(o).map_err(|e| CliError::new("service_config", format!("CORS origin {o:?}: {e}"))))
        .collect::<Result<Vec<_>, _>>()?;
    let cors = CorsLayer::new()
        .allow_origin(origins)
        .allow_methods([Method::GET, Method::POST, Method::DELETE])
        .allow_headers([axum::http::header::CONTENT_TYPE]);
    Ok(app.layer(cors))
}

/// Sweeps expired sessions periodically for as long as the runtime lives.
pub fn spawn_evictor(state: Arc<AppState>) {
    let period = (state.ttl / 2).clamp(Duration::from_millis(50), Duration::from_secs(60));
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(period);
        loop {
            tick.tick().await;
            let evicted = state.evict_expired();
            if evicted > 0 {
                tracing::info!(evicted, "expired sessions removed");
            }
        }
    });
}

pub async fn serve(config: ServiceConfig) -> Result<(), CliError> {
    let state = Arc::new(AppState::from_config(&config)?);
    let app = router(state.clone(), &config.cors_origins)?;
    let listener = tokio::net::TcpListener::bind(&config.listen)
        .await
        .map_err(|e| CliError::new("bind", format!("{}: {e}", config.listen)))?;
    tracing::info!(address = %config.listen, "serving");
    spawn_evictor(state);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| CliError::new("serve", e))
}
