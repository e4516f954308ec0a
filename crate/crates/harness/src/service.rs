//! HTTP session service backing the injection console.
//!
//! Sessions live in memory only; restarting the service drops them. With a
//! session log configured every session event is also appended as one JSON
//! line, for audit.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use k2r_core::pipeline::{PipelineError, MAX_CONFIDENCE};
use k2r_core::{Beam, DialogueEpisode, K2RConfig, Pipeline, PipelineTrace};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::{Mutex, RwLock};
use tower_http::cors::CorsLayer;

use crate::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub episode: DialogueEpisode,
    pub config: K2RConfig,
    pub seed: u64,
    pub history: Vec<PipelineTrace>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub episode: DialogueEpisode,
    pub config: K2RConfig,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RespondRequest {
    #[serde(default)]
    pub injected_knowledge: Option<String>,
    #[serde(default)]
    pub confidence: Option<u8>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct KnowledgeReply {
    pub predicted_knowledge: String,
    pub beams: Vec<Beam>,
}

struct Slot {
    pipeline: Pipeline,
    session: Mutex<Session>,
}

#[derive(Clone, Default)]
pub struct AppState {
    sessions: Arc<RwLock<HashMap<String, Arc<Slot>>>>,
    log: Option<Arc<std::sync::Mutex<File>>>,
}

impl AppState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_session_log(path: &Path) -> Result<Self, HarnessError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| HarnessError::data(path.display(), e))?;
        Ok(Self {
            log: Some(Arc::new(std::sync::Mutex::new(file))),
            ..Self::default()
        })
    }

    fn record(&self, event: Value) {
        let Some(log) = &self.log else { return };
        let mut f = log.lock().unwrap_or_else(|e| e.into_inner());
        if let Err(e) = writeln!(f, "{event}") {
            log::warn!("session log write failed: {e}");
        }
    }

    async fn slot(&self, id: &str) -> Result<Arc<Slot>, ApiError> {
        self.sessions
            .read()
            .await
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(id.to_owned()))
    }
}

#[derive(Debug)]
pub enum ApiError {
    NotFound(String),
    BadRequest {
        field: Option<String>,
        message: String,
    },
    Backend {
        step: String,
        message: String,
    },
    Internal(String),
}

impl ApiError {
    fn from_pipeline(e: PipelineError, field: &str) -> Self {
        match e.step() {
            Some(step) => ApiError::Backend {
                step: step.to_string(),
                message: e.to_string(),
            },
            None => ApiError::BadRequest {
                field: Some(field.to_owned()),
                message: e.to_string(),
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match self {
            ApiError::NotFound(id) => (
                StatusCode::NOT_FOUND,
                json!({ "error": format!("unknown session {id}") }),
            ),
            ApiError::BadRequest { field, message } => (
                StatusCode::BAD_REQUEST,
                json!({ "error": message, "field": field }),
            ),
            ApiError::Backend { step, message } => (
                StatusCode::BAD_GATEWAY,
                json!({ "error": message, "step": step }),
            ),
            ApiError::Internal(message) => (
                StatusCode::INTERNAL_SERVER_ERROR,
                json!({ "error": message }),
            ),
        };
        (status, Json(body)).into_response()
    }
}

/// Parses a JSON body, naming the offending field on failure. An empty body
/// reads as `{}`.
fn parse_body<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, ApiError> {
    let bytes: &[u8] = if bytes.iter().all(u8::is_ascii_whitespace) {
        b"{}"
    } else {
        bytes
    };
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let field = match path.as_str() {
            "." | "" => None,
            p => Some(p.to_owned()),
        };
        ApiError::BadRequest {
            field,
            message: e.into_inner().to_string(),
        }
    })
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> T + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))
}

async fn create_session(
    State(state): State<AppState>,
    body: Bytes,
) -> Result<Json<SessionCreated>, ApiError> {
    let req: CreateSession = parse_body(&body)?;
    if req.episode.turns.is_empty() {
        return Err(ApiError::BadRequest {
            field: Some("episode.turns".into()),
            message: "episode has no turns".into(),
        });
    }
    let config = req.config.clone();
    let pipeline = blocking(move || Pipeline::from_config(config))
        .await?
        .map_err(|e| ApiError::BadRequest {
            field: Some("config".into()),
            message: e.to_string(),
        })?;
    let session_id = uuid::Uuid::new_v4().to_string();
    let session = Session {
        session_id: session_id.clone(),
        episode: req.episode,
        config: req.config,
        seed: req.seed,
        history: Vec::new(),
    };
    state.record(json!({ "event": "created", "session_id": session_id, "session": session }));
    let slot = Arc::new(Slot {
        pipeline,
        session: Mutex::new(session),
    });
    state
        .sessions
        .write()
        .await
        .insert(session_id.clone(), slot);
    Ok(Json(SessionCreated { session_id }))
}

async fn get_session(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<Session>, ApiError> {
    let slot = state.slot(&id).await?;
    let session = slot.session.lock().await.clone();
    Ok(Json(session))
}

async fn predict_knowledge(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<KnowledgeReply>, ApiError> {
    let slot = state.slot(&id).await?;
    let (episode, seed) = {
        let s = slot.session.lock().await;
        (s.episode.clone(), s.seed)
    };
    let pipeline = slot.pipeline.clone();
    let prediction = blocking(move || pipeline.predict_knowledge(&episode, seed))
        .await?
        .map_err(|e| ApiError::from_pipeline(e, "episode"))?;
    state.record(json!({ "event": "knowledge", "session_id": id, "predicted_knowledge": prediction.knowledge }));
    Ok(Json(KnowledgeReply {
        predicted_knowledge: prediction.knowledge,
        beams: prediction.beams,
    }))
}

async fn respond(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<PipelineTrace>, ApiError> {
    let slot = state.slot(&id).await?;
    let req: RespondRequest = parse_body(&body)?;
    if let Some(c) = req.confidence.filter(|c| *c > MAX_CONFIDENCE) {
        return Err(ApiError::BadRequest {
            field: Some("confidence".into()),
            message: format!("confidence {c} outside 0..={MAX_CONFIDENCE}"),
        });
    }
    // Held across the backend call: one probe at a time per session.
    let mut session = slot.session.lock().await;
    let pipeline = match req.confidence {
        Some(c) => slot
            .pipeline
            .with_confidence(Some(c))
            .map_err(|e| ApiError::BadRequest {
                field: Some("confidence".into()),
                message: e.to_string(),
            })?,
        None => slot.pipeline.clone(),
    };
    let episode = session.episode.clone();
    let seed = session.seed;
    let injected = req.injected_knowledge;
    let trace = blocking(move || pipeline.respond(&episode, seed, injected.as_deref()))
        .await?
        .map_err(|e| ApiError::from_pipeline(e, "injected_knowledge"))?;
    session.history.push(trace.clone());
    state.record(json!({ "event": "respond", "session_id": id, "trace": trace }));
    Ok(Json(trace))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}", get(get_session))
        .route("/api/sessions/{id}/knowledge", post(predict_knowledge))
        .route("/api/sessions/{id}/respond", post(respond))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Binds and serves until the process is stopped.
pub fn serve(addr: SocketAddr, state: AppState) -> Result<(), HarnessError> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| HarnessError::Usage(format!("runtime: {e}")))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| HarnessError::Usage(format!("bind {addr}: {e}")))?;
        log::info!("listening on {addr}");
        axum::serve(listener, router(state))
            .await
            .map_err(|e| HarnessError::Usage(format!("serve: {e}")))
    })
}
