//! Annotation service: one pending query per session, labels committed
//! through the learner, state checkpointed to disk after every commit.

pub mod session;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::json;

use cocoba::corpus::{Dataset, Label, Span};
use cocoba::embeddings::EmbeddingSnapshot;
use cocoba::engine::{EngineConfig, EngineError, QuerySource, RankContext};
use cocoba::strategy::Strategy;

pub use session::{load_records, replay, save_record, CurvePoint, LogEntry, Replay, Session, SessionError, SessionRecord};

/// Settings shared by every session of one server.
#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub engine: EngineConfig,
    pub cold_start: usize,
    pub state_dir: PathBuf,
}

/// Read-mostly view of a session, refreshed after every commit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatusView {
    pub session_id: String,
    pub strategy: Strategy,
    pub seed: u64,
    pub config: EngineConfig,
    pub labeled: usize,
    pub unlabeled: usize,
    pub test: usize,
    pub labels_submitted: usize,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    pub curve: Vec<CurvePoint>,
}

impl StatusView {
    fn of(s: &Session) -> Self {
        let pool = s.learner.pool();
        StatusView {
            session_id: s.record.session_id.clone(),
            strategy: s.learner.strategy(),
            seed: s.record.seed,
            config: s.record.checkpoint.config.clone(),
            labeled: pool.labeled.len(),
            unlabeled: pool.unlabeled.len(),
            test: pool.test.len(),
            labels_submitted: s.record.log.len(),
            created_at: s.record.created_at,
            updated_at: s.record.updated_at,
            curve: s.record.curve.clone(),
        }
    }
}

/// Commits go through `session` one at a time; `status` serves readers
/// without waiting on retraining.
struct SessionSlot {
    session: Mutex<Session>,
    status: RwLock<StatusView>,
}

struct Inner {
    dataset: Dataset,
    snapshot: EmbeddingSnapshot,
    config: ServiceConfig,
    sessions: RwLock<HashMap<String, Arc<SessionSlot>>>,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    /// Loads every session persisted under the state directory.
    pub fn new(dataset: Dataset, snapshot: EmbeddingSnapshot, config: ServiceConfig) -> Result<Self, SessionError> {
        let mut sessions = HashMap::new();
        for record in load_records(&config.state_dir)? {
            let id = record.session_id.clone();
            let s = Session::restore(record, &dataset, &snapshot)?;
            sessions.insert(id, Arc::new(SessionSlot { status: RwLock::new(StatusView::of(&s)), session: Mutex::new(s) }));
        }
        Ok(AppState(Arc::new(Inner { dataset, snapshot, config, sessions: RwLock::new(sessions) })))
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.0.sessions.read().unwrap().keys().cloned().collect();
        ids.sort();
        ids
    }

    /// Persisted record of a session, as it would be reloaded after a restart.
    pub fn record(&self, id: &str) -> Option<SessionRecord> {
        let slot = self.slot(id).ok()?;
        let s = slot.session.lock().unwrap();
        Some(s.record.clone())
    }

    pub fn snapshot(&self) -> &EmbeddingSnapshot {
        &self.0.snapshot
    }

    fn slot(&self, id: &str) -> Result<Arc<SessionSlot>, ApiError> {
        self.0.sessions.read().unwrap().get(id).cloned().ok_or_else(|| ApiError::SessionNotFound(id.to_string()))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("no session {0:?}")]
    SessionNotFound(String),
    #[error("the unlabeled pool is exhausted")]
    PoolExhausted,
    #[error("posting {submitted:?} is not the pending query")]
    StaleQuery { submitted: String, pending: Option<String> },
    #[error("label must be 1 or -1, got {0}")]
    BadLabel(i64),
    #[error("{0}")]
    BadRequest(String),
    #[error(transparent)]
    Session(#[from] SessionError),
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::EmptyUnlabeledPool => ApiError::PoolExhausted,
            e => ApiError::Session(e.into()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, kind) = match &self {
            ApiError::SessionNotFound(_) => (StatusCode::NOT_FOUND, "SessionNotFound"),
            ApiError::PoolExhausted => (StatusCode::CONFLICT, "PoolExhausted"),
            ApiError::StaleQuery { .. } => (StatusCode::CONFLICT, "StaleQuery"),
            ApiError::BadLabel(_) => (StatusCode::UNPROCESSABLE_ENTITY, "BadLabel"),
            ApiError::BadRequest(_) => (StatusCode::BAD_REQUEST, "BadRequest"),
            ApiError::Session(_) => (StatusCode::INTERNAL_SERVER_ERROR, "Internal"),
        };
        if status.is_server_error() {
            tracing::error!("{self}");
        }
        let mut body = json!({ "error": kind, "message": self.to_string() });
        if let ApiError::StaleQuery { pending, .. } = &self {
            body["pending_id"] = json!(pending);
        }
        (status, Json(body)).into_response()
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub strategy: Option<Strategy>,
    pub seed: Option<u64>,
    pub cold_start: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub session_id: String,
    pub strategy: Strategy,
    pub seed: u64,
    pub labeled: usize,
    pub unlabeled: usize,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NextQuery {
    pub posting_id: String,
    pub text: String,
    pub term_spans: Vec<Span>,
    pub aggregate_score: Option<f64>,
    pub source: QuerySource,
    pub rank_context: RankContext,
}

#[derive(Debug, Deserialize)]
pub struct LabelRequest {
    pub posting_id: String,
    pub label: i64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LabelAccepted {
    pub accepted: bool,
    pub labeled: usize,
    pub unlabeled: usize,
    pub f1: Option<f64>,
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::Session(SessionError::Other(e.to_string())))?
}

async fn create_session(
    State(app): State<AppState>,
    body: Option<Json<CreateSession>>,
) -> Result<(StatusCode, Json<Created>), ApiError> {
    let req = body.map(|Json(b)| b).unwrap_or_default();
    let inner = app.0.clone();
    let created = blocking(move || {
        let mut engine = inner.config.engine.clone();
        if let Some(s) = req.strategy {
            engine.strategy = s;
        }
        let seed = req.seed.unwrap_or(engine.rng_seed);
        engine.rng_seed = seed;
        engine.validate()?;
        let cold_start = req.cold_start.unwrap_or(inner.config.cold_start);
        let id = uuid::Uuid::new_v4().to_string();
        let s = Session::create(id.clone(), &inner.dataset, &inner.snapshot, engine, cold_start, seed).map_err(|e| match e {
            SessionError::Corpus(c) => ApiError::BadRequest(c.to_string()),
            e => e.into(),
        })?;
        save_record(&inner.config.state_dir, &s.record)?;
        let created = Created {
            session_id: id.clone(),
            strategy: s.learner.strategy(),
            seed,
            labeled: s.learner.pool().labeled.len(),
            unlabeled: s.learner.pool().unlabeled.len(),
            created_at: s.record.created_at,
        };
        let slot = Arc::new(SessionSlot { status: RwLock::new(StatusView::of(&s)), session: Mutex::new(s) });
        inner.sessions.write().unwrap().insert(id, slot);
        Ok(created)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(created)))
}

async fn next_query(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<NextQuery>, ApiError> {
    let slot = app.slot(&id)?;
    let inner = app.0.clone();
    let next = blocking(move || {
        let mut s = slot.session.lock().unwrap();
        if s.learner.pool().unlabeled.is_empty() {
            return Err(ApiError::PoolExhausted);
        }
        let q = s.learner.next_query()?;
        let posting = inner
            .dataset
            .postings()
            .find(|p| p.id() == q.id)
            .ok_or_else(|| ApiError::Session(SessionError::Other(format!("posting {:?} missing from dataset", q.id))))?;
        Ok(NextQuery {
            posting_id: q.id,
            text: posting.text().to_string(),
            term_spans: posting.term_spans().to_vec(),
            aggregate_score: q.score,
            source: q.source,
            rank_context: q.rank_context,
        })
    })
    .await?;
    Ok(Json(next))
}

async fn submit_label(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<LabelRequest>,
) -> Result<Json<LabelAccepted>, ApiError> {
    let label = Label::from_i64(req.label).ok_or(ApiError::BadLabel(req.label))?;
    let slot = app.slot(&id)?;
    let state_dir = app.0.config.state_dir.clone();
    let accepted = blocking(move || {
        let mut s = slot.session.lock().unwrap();
        let pending = if s.learner.pool().unlabeled.is_empty() { None } else { Some(s.learner.next_query()?.id) };
        if pending.as_deref() != Some(req.posting_id.as_str()) {
            return Err(ApiError::StaleQuery { submitted: req.posting_id, pending });
        }
        let f1 = s.commit(&req.posting_id, label)?;
        save_record(&state_dir, &s.record)?;
        *slot.status.write().unwrap() = StatusView::of(&s);
        Ok(LabelAccepted {
            accepted: true,
            labeled: s.learner.pool().labeled.len(),
            unlabeled: s.learner.pool().unlabeled.len(),
            f1,
        })
    })
    .await?;
    Ok(Json(accepted))
}

async fn status(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<StatusView>, ApiError> {
    let slot = app.slot(&id)?;
    let view = slot.status.read().unwrap().clone();
    Ok(Json(view))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/session", post(create_session))
        .route("/session/{id}/next", get(next_query))
        .route("/session/{id}/label", post(submit_label))
        .route("/session/{id}/status", get(status))
        .with_state(state)
}
