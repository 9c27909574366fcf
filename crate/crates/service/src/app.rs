//! HTTP API over a deployment of per-city engines.

use std::collections::BTreeMap;
use std::future::Future;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Context;
use axum::body::{Body, Bytes};
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use polyfind_core::booking::BookingTurn;
use polyfind_core::dialogue::{Deployment, Engine, EngineOptions, Mode, TurnResult};
use polyfind_core::encoder::{DualEncoder, EncoderModel, TextEncoder};
use polyfind_core::featurizer::Vocab;
use polyfind_core::index::{HnswParams, Kind, ResponseIndex};
use polyfind_core::intent::{IntentKind, IntentSet};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;

use crate::config::ServiceConfig;
use crate::provider::build_provider;
use crate::sessions::{new_token, AcquireError, SessionRecord, SessionStore};

/// What the service knows about a configured city besides its engine.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CityInfo {
    pub language: String,
    pub index_path: Option<PathBuf>,
    pub photos_dir: Option<PathBuf>,
}

pub struct AppState {
    pub deployment: Deployment<f32>,
    pub cities: BTreeMap<String, CityInfo>,
    pub sessions: SessionStore,
    pub snapshot_path: Option<PathBuf>,
    approximate: bool,
}

impl AppState {
    pub fn new(deployment: Deployment<f32>, cities: BTreeMap<String, CityInfo>, sessions: SessionStore) -> Self {
        AppState {
            deployment,
            cities,
            sessions,
            snapshot_path: None,
            approximate: false,
        }
    }

    /// Loads every model and index named in `config` and restores saved
    /// sessions.
    pub fn from_config(config: &ServiceConfig) -> anyhow::Result<Self> {
        let (deployment, cities) = load_deployment(config)?;
        let sessions = SessionStore::new(config.session_ttl());
        if let Some(p) = &config.snapshot_path {
            let n = sessions.load(p, |r| cities.contains_key(&r.state.city))?;
            tracing::info!(restored = n, path = %p.display(), "sessions restored");
        }
        let mut state = AppState::new(deployment, cities, sessions);
        state.snapshot_path = config.snapshot_path.clone();
        state.approximate = config.approximate;
        Ok(state)
    }

    /// Reloads a city's index from disk and swaps it in. Turns already
    /// running finish on the old index.
    pub fn reload_index(&self, city: &str) -> anyhow::Result<()> {
        let info = self.cities.get(city).with_context(|| format!("unknown city {city}"))?;
        let path = info.index_path.as_ref().with_context(|| format!("city {city} has no index file"))?;
        let index = load_index(path, self.approximate)?;
        self.deployment.engine(city)?.swap_index(Arc::new(index));
        Ok(())
    }

    pub async fn save_snapshot(&self) -> anyhow::Result<usize> {
        match &self.snapshot_path {
            Some(p) => self.sessions.save(p).await,
            None => Ok(0),
        }
    }
}

/// Builds one engine per configured city, sharing the encoder, intents and
/// translation provider.
pub fn load_deployment(config: &ServiceConfig) -> anyhow::Result<(Deployment<f32>, BTreeMap<String, CityInfo>)> {
    config.validate()?;
    let vocab = Vocab::load(&config.encoder.vocab).with_context(|| format!("loading {}", config.encoder.vocab.display()))?;
    let model = EncoderModel::<f32>::load(&config.encoder.model)
        .with_context(|| format!("loading {}", config.encoder.model.display()))?;
    let encoder: Arc<dyn TextEncoder<f32>> = Arc::new(DualEncoder::new(vocab, model)?);
    let intents = match &config.intents {
        Some(p) => Some(Arc::new(IntentSet::<f32>::load(p).with_context(|| format!("loading {}", p.display()))?)),
        None => None,
    };
    let translator = build_provider(&config.translation.provider)?;
    let options = EngineOptions {
        flow: config.flow,
        approximate: config.approximate,
        today: None,
    };
    let mut deployment = Deployment::default();
    let mut cities = BTreeMap::new();
    for city in &config.cities {
        let index = load_index(&city.index, config.approximate)?;
        let mut engine = Engine::new(&city.name, Arc::new(index), Arc::clone(&encoder), options.clone())?
            .with_translator(Arc::clone(&translator));
        if let Some(i) = &intents {
            engine = engine.with_intents(Arc::clone(i));
        }
        deployment.insert(engine);
        cities.insert(
            city.name.clone(),
            CityInfo {
                language: city.language.clone(),
                index_path: Some(city.index.clone()),
                photos_dir: city.photos_dir.clone(),
            },
        );
    }
    Ok((deployment, cities))
}

fn load_index(path: &std::path::Path, approximate: bool) -> anyhow::Result<ResponseIndex<f32>> {
    let mut index = ResponseIndex::<f32>::load(path).with_context(|| format!("loading {}", path.display()))?;
    if approximate {
        index.build_approx(HnswParams::default());
    }
    Ok(index)
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }
}

impl From<AcquireError> for ApiError {
    fn from(e: AcquireError) -> Self {
        match e {
            AcquireError::NotFound => ApiError::new(StatusCode::NOT_FOUND, "unknown_session", e.to_string()),
            AcquireError::Busy => ApiError::new(StatusCode::CONFLICT, "session_busy", e.to_string()),
        }
    }
}

impl From<polyfind_core::Error> for ApiError {
    fn from(e: polyfind_core::Error) -> Self {
        use polyfind_core::Error as E;
        match e {
            E::Provider { .. } => ApiError::new(StatusCode::BAD_GATEWAY, "translation_failed", e.to_string()),
            E::UnknownCity(_) => ApiError::new(StatusCode::NOT_FOUND, "unknown_city", e.to_string()),
            _ => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
        }
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: ErrorDetail<'a>,
}

#[derive(Serialize)]
struct ErrorDetail<'a> {
    code: &'a str,
    message: &'a str,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: ErrorDetail {
                code: self.code,
                message: &self.message,
            },
        };
        (self.status, Json(body)).into_response()
    }
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.to_string()))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    city: String,
    language: Option<String>,
}

#[derive(Serialize)]
struct Created {
    session_id: String,
    city: String,
    language: String,
    entities_remaining: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TurnRequest {
    text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseJson {
    pub entity_id: String,
    pub entity_name: String,
    pub candidate_id: u32,
    pub kind: Kind,
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhotoJson {
    pub photo_id: String,
    pub entity_id: String,
    pub caption: Option<String>,
    pub score: f64,
    pub url: String,
}

/// Body of a successful turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnJson {
    pub responses: Vec<ResponseJson>,
    pub photos: Vec<PhotoJson>,
    pub spoken: String,
    pub entities_remaining: Vec<String>,
    pub mode: Mode,
    pub intent: Option<IntentKind>,
    pub booking: Option<BookingTurn>,
    pub english_context: Option<Vec<String>>,
}

impl From<TurnResult> for TurnJson {
    fn from(r: TurnResult) -> Self {
        TurnJson {
            responses: r
                .displayed
                .into_iter()
                .map(|d| ResponseJson {
                    entity_id: d.entity_id,
                    entity_name: d.entity_name,
                    candidate_id: d.candidate_id,
                    kind: d.kind,
                    text: d.text,
                    score: d.score,
                })
                .collect(),
            photos: r
                .photos
                .into_iter()
                .map(|p| PhotoJson {
                    url: format!("/v1/photos/{}", p.photo_id),
                    photo_id: p.photo_id,
                    entity_id: p.entity_id,
                    caption: p.caption,
                    score: p.score,
                })
                .collect(),
            spoken: r.spoken,
            entities_remaining: r.remaining,
            mode: r.mode,
            intent: r.intent,
            booking: r.booking,
            english_context: r.english_context,
        }
    }
}

/// Body of `GET /v1/sessions/{id}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionJson {
    pub session_id: String,
    pub city: String,
    pub language: String,
    pub entities_remaining: Vec<String>,
    pub mode: Mode,
    pub booking: polyfind_core::booking::BookingSlots,
    pub history_length: usize,
    pub created: chrono::DateTime<Utc>,
    pub updated: chrono::DateTime<Utc>,
}

impl From<SessionRecord> for SessionJson {
    fn from(r: SessionRecord) -> Self {
        SessionJson {
            session_id: r.state.session_id,
            city: r.state.city,
            language: r.state.language,
            entities_remaining: r.state.relevant.into_iter().collect(),
            mode: r.state.mode,
            booking: r.state.booking,
            history_length: r.state.history.len(),
            created: r.created,
            updated: r.updated,
        }
    }
}

type Shared = Arc<AppState>;

async fn create_session(State(app): State<Shared>, body: Bytes) -> Result<Response, ApiError> {
    let req: CreateSession = parse_body(&body)?;
    let info = app
        .cities
        .get(&req.city)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_city", format!("unknown city {:?}", req.city)))?;
    let language = req.language.unwrap_or_else(|| info.language.clone());
    if language.is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "bad_request", "language must not be empty"));
    }
    let id = new_token();
    let state = app.deployment.new_session(&req.city, &id, &language)?;
    let now = Utc::now();
    let body = Created {
        session_id: id,
        city: req.city,
        language,
        entities_remaining: state.relevant.len(),
    };
    app.sessions.insert(SessionRecord {
        state,
        created: now,
        updated: now,
    });
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

async fn take_turn(State(app): State<Shared>, Path(id): Path<String>, body: Bytes) -> Result<Json<TurnJson>, ApiError> {
    let req: TurnRequest = parse_body(&body)?;
    let mut guard = app.sessions.try_acquire(&id)?;
    let worker = Arc::clone(&app);
    let result = tokio::task::spawn_blocking(move || {
        let result = worker.deployment.step(&mut guard.state, &req.text);
        if result.is_ok() {
            guard.updated = Utc::now();
        }
        result
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    Ok(Json(result.into()))
}

async fn get_session(State(app): State<Shared>, Path(id): Path<String>) -> Result<Json<SessionJson>, ApiError> {
    Ok(Json(app.sessions.read(&id).await?.into()))
}

#[derive(Serialize)]
struct CityJson<'a> {
    name: &'a str,
    language: &'a str,
    entities: usize,
}

async fn list_cities(State(app): State<Shared>) -> Response {
    let list: Vec<CityJson> = app
        .cities
        .iter()
        .map(|(name, info)| CityJson {
            name,
            language: &info.language,
            entities: app.deployment.engine(name).map_or(0, |e| e.index().entities().len()),
        })
        .collect();
    Json(list).into_response()
}

const PHOTO_TYPES: [(&str, &str); 4] = [
    ("jpg", "image/jpeg"),
    ("jpeg", "image/jpeg"),
    ("png", "image/png"),
    ("webp", "image/webp"),
];

fn valid_photo_id(id: &str) -> bool {
    !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

async fn get_photo(State(app): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let not_found = || ApiError::new(StatusCode::NOT_FOUND, "unknown_photo", format!("no photo {id:?}"));
    if !valid_photo_id(&id) {
        return Err(not_found());
    }
    for dir in app.cities.values().filter_map(|c| c.photos_dir.as_ref()) {
        for (ext, mime) in PHOTO_TYPES {
            let path = dir.join(format!("{id}.{ext}"));
            if let Ok(bytes) = tokio::fs::read(&path).await {
                return Ok(([(header::CONTENT_TYPE, mime)], Body::from(bytes)).into_response());
            }
        }
    }
    Err(not_found())
}

async fn fallback() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

pub fn router(app: Shared) -> Router {
    Router::new()
        .route("/v1/cities", get(list_cities))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/sessions/{id}/turns", post(take_turn))
        .route("/v1/photos/{id}", get(get_photo))
        .route("/healthz", get(|| async { "ok" }))
        .fallback(fallback)
        .with_state(app)
}

/// Serves until `shutdown` resolves, sweeping expired sessions and saving
/// the snapshot every `snapshot_every`, and once more on the way out.
pub async fn serve(
    app: Shared,
    listener: TcpListener,
    snapshot_every: std::time::Duration,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> anyhow::Result<()> {
    let ticker = {
        let app = Arc::clone(&app);
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(snapshot_every);
            tick.tick().await;
            loop {
                tick.tick().await;
                let dropped = app.sessions.sweep(Utc::now());
                if dropped > 0 {
                    tracing::info!(dropped, "expired sessions removed");
                }
                if let Err(e) = app.save_snapshot().await {
                    tracing::warn!("snapshot failed: {e:#}");
                }
            }
        })
    };
    let result = axum::serve(listener, router(Arc::clone(&app)))
        .with_graceful_shutdown(shutdown)
        .await;
    ticker.abort();
    let saved = app.save_snapshot().await?;
    tracing::info!(saved, "sessions saved");
    result.context("server error")
}
