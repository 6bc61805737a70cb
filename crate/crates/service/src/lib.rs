//! What-if service: browse a scenario corpus, edit a per-session drivable
//! mask and re-run the full prediction pipeline on the edited scene.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use tokio::sync::Mutex;
use tower_http::cors::{AllowOrigin, CorsLayer};

use trajirl_core::api::{
    CreateSession, ErrorBody, Health, MaskEdit, MaskState, PredictPayload, PredictRequest, ScenarioList, SessionCreated,
};
use trajirl_core::model::{predict, prepare, ModelConfig, SampleOptions};
use trajirl_core::nn::ParamStore;
use trajirl_core::scene::{load_corpus, CorpusEntry};

/// Upper bound on `L` per request.
pub const MAX_PLANS: usize = 20_000;

#[derive(Debug)]
pub enum ApiError {
    NotFound(String),
    Conflict(String),
    Invalid(String),
    BadRequest(String),
    Internal { id: String, message: String },
}

impl ApiError {
    fn internal(message: impl Into<String>) -> Self {
        let id = uuid::Uuid::new_v4().to_string();
        let message = message.into();
        tracing::error!(diagnostic_id = %id, "{message}");
        ApiError::Internal { id, message }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        match r.status() {
            StatusCode::UNPROCESSABLE_ENTITY => ApiError::Invalid(r.body_text()),
            _ => ApiError::BadRequest(r.body_text()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, error, diagnostic_id) = match self {
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, m, None),
            ApiError::Conflict(m) => (StatusCode::CONFLICT, m, None),
            ApiError::Invalid(m) => (StatusCode::UNPROCESSABLE_ENTITY, m, None),
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, m, None),
            ApiError::Internal { id, message } => (StatusCode::INTERNAL_SERVER_ERROR, message, Some(id)),
        };
        (status, Json(ErrorBody { error, diagnostic_id })).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Debug, Default)]
struct Session {
    scenario_id: String,
    blocked: BTreeSet<[usize; 2]>,
}

/// Immutable corpus and checkpoints plus the mutable session table.
pub struct AppState {
    scenarios: BTreeMap<String, CorpusEntry>,
    model: ModelConfig,
    stage1: Option<Arc<ParamStore>>,
    stage2: Option<Arc<ParamStore>>,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
}

impl AppState {
    pub fn new(
        corpus: Vec<CorpusEntry>,
        model: ModelConfig,
        stage1: Option<ParamStore>,
        stage2: Option<ParamStore>,
    ) -> Self {
        AppState {
            scenarios: corpus.into_iter().map(|e| (e.scenario.id.clone(), e)).collect(),
            model,
            stage1: stage1.map(Arc::new),
            stage2: stage2.map(Arc::new),
            sessions: RwLock::new(HashMap::new()),
        }
    }

    /// Corpus directory plus optional checkpoint files.
    pub fn load(
        corpus_dir: &Path,
        model: ModelConfig,
        stage1: Option<&Path>,
        stage2: Option<&Path>,
    ) -> trajirl_core::Result<Self> {
        let corpus = load_corpus(corpus_dir)?;
        let s1 = stage1.map(|p| model.load_checkpoint(p, false)).transpose()?;
        let s2 = stage2.map(|p| model.load_checkpoint(p, true)).transpose()?;
        Ok(Self::new(corpus, model, s1, s2))
    }

    fn session(&self, sid: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.sessions
            .read()
            .expect("session table lock")
            .get(sid)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("unknown session `{sid}`")))
    }

    fn entry(&self, id: &str) -> Result<&CorpusEntry, ApiError> {
        self.scenarios
            .get(id)
            .ok_or_else(|| ApiError::NotFound(format!("unknown scenario `{id}`")))
    }
}

async fn health() -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
    })
}

async fn list_scenarios(State(st): State<Arc<AppState>>) -> Json<ScenarioList> {
    Json(ScenarioList {
        scenarios: st.scenarios.keys().cloned().collect(),
    })
}

async fn get_scenario(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let e = st.entry(&id)?;
    Ok(([(header::CONTENT_TYPE, "application/json")], e.text.clone()).into_response())
}

async fn create_session(
    State(st): State<Arc<AppState>>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> Result<(StatusCode, Json<SessionCreated>), ApiError> {
    let Json(req) = body?;
    st.entry(&req.scenario_id)?;
    let sid = uuid::Uuid::new_v4().to_string();
    let session = Session {
        scenario_id: req.scenario_id.clone(),
        blocked: BTreeSet::new(),
    };
    st.sessions
        .write()
        .expect("session table lock")
        .insert(sid.clone(), Arc::new(Mutex::new(session)));
    Ok((
        StatusCode::CREATED,
        Json(SessionCreated {
            session_id: sid,
            scenario_id: req.scenario_id,
        }),
    ))
}

fn mask_state(st: &AppState, sid: &str, s: &Session, noop: Vec<[usize; 2]>) -> Result<MaskState, ApiError> {
    let base = &st.entry(&s.scenario_id)?.scenario;
    let cells: Vec<(usize, usize)> = s.blocked.iter().map(|&[r, c]| (r, c)).collect();
    Ok(MaskState {
        session_id: sid.to_string(),
        scenario_id: s.scenario_id.clone(),
        blocked_cells: s.blocked.iter().copied().collect(),
        noop,
        mask: base.mask_with_blocked(&cells),
    })
}

async fn get_session(State(st): State<Arc<AppState>>, UrlPath(sid): UrlPath<String>) -> ApiResult<MaskState> {
    let session = st.session(&sid)?;
    let s = session.lock().await;
    Ok(Json(mask_state(&st, &sid, &s, Vec::new())?))
}

async fn edit_mask(
    State(st): State<Arc<AppState>>,
    UrlPath(sid): UrlPath<String>,
    body: Result<Json<MaskEdit>, JsonRejection>,
) -> ApiResult<MaskState> {
    let Json(edit) = body?;
    let session = st.session(&sid)?;
    let mut s = session.lock().await;
    let base = &st.entry(&s.scenario_id)?.scenario;
    let side = base.grid_side;
    let check = |&[r, c]: &[i64; 2]| -> Result<[usize; 2], ApiError> {
        if r < 0 || c < 0 || r as usize >= side || c as usize >= side {
            return Err(ApiError::Invalid(format!(
                "cell [{r}, {c}] is outside the {side}x{side} grid"
            )));
        }
        Ok([r as usize, c as usize])
    };
    // Validate everything before touching the session.
    let block: Vec<[usize; 2]> = edit.blocked_cells.iter().map(check).collect::<Result<_, _>>()?;
    let revert: Vec<[usize; 2]> = edit.revert.iter().map(check).collect::<Result<_, _>>()?;
    let mut noop = Vec::new();
    for cell in block {
        if !base.drivable_mask.get(cell[0], cell[1]) || !s.blocked.insert(cell) {
            noop.push(cell);
        }
    }
    for cell in revert {
        if !s.blocked.remove(&cell) {
            noop.push(cell);
        }
    }
    Ok(Json(mask_state(&st, &sid, &s, noop)?))
}

async fn run_predict(
    State(st): State<Arc<AppState>>,
    UrlPath(sid): UrlPath<String>,
    body: Result<Json<PredictRequest>, JsonRejection>,
) -> ApiResult<PredictPayload> {
    let Json(req) = body?;
    if req.k == 0 || req.l < req.k || req.l > MAX_PLANS {
        return Err(ApiError::Invalid(format!(
            "need 1 <= K <= L <= {MAX_PLANS} (got K={}, L={})",
            req.k, req.l
        )));
    }
    let session = st.session(&sid)?;
    let (scenario_id, blocked) = {
        let s = session.lock().await;
        (s.scenario_id.clone(), s.blocked.iter().copied().collect::<Vec<_>>())
    };
    let Some(stage1) = st.stage1.clone() else {
        return Err(ApiError::Conflict("no reward-network checkpoint is loaded".into()));
    };
    let stage2 = st.stage2.clone();
    let state = st.clone();
    let payload = tokio::task::spawn_blocking(move || {
        let start = Instant::now();
        let scenario = &state
            .entry(&scenario_id)
            .map_err(|_| "scenario vanished".to_string())?
            .scenario;
        let prep = prepare(scenario, &blocked, &state.model).map_err(|e| e.to_string())?;
        let opts = SampleOptions {
            num_plans: req.l,
            num_modes: req.k,
            seed: req.seed,
        };
        let pred = predict(&stage1, stage2.as_deref(), &prep, &state.model, &opts, false).map_err(|e| e.to_string())?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        Ok::<_, String>(PredictPayload::new(&pred, &prep, &req, stage2.is_some(), ms))
    })
    .await
    .map_err(|e| ApiError::internal(format!("prediction task failed: {e}")))?
    .map_err(|e| ApiError::internal(format!("prediction failed: {e}")))?;
    Ok(Json(payload))
}

async fn not_found() -> ApiError {
    ApiError::NotFound("no such endpoint".into())
}

/// Routes under `/api`. `cors_origin = None` allows any origin.
pub fn router(state: Arc<AppState>, cors_origin: Option<&str>) -> Router {
    let origin = match cors_origin.and_then(|o| HeaderValue::from_str(o).ok()) {
        Some(o) => AllowOrigin::exact(o),
        None => AllowOrigin::any(),
    };
    let cors = CorsLayer::new()
        .allow_origin(origin)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    Router::new()
        .route("/api/health", get(health))
        .route("/api/scenarios", get(list_scenarios))
        .route("/api/scenarios/{id}", get(get_scenario))
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{sid}", get(get_session))
        .route("/api/sessions/{sid}/mask", post(edit_mask))
        .route("/api/sessions/{sid}/predict", post(run_predict))
        .fallback(not_found)
        .layer(cors)
        .with_state(state)
}

/// Serve until Ctrl-C.
pub async fn serve(addr: SocketAddr, state: Arc<AppState>, cors_origin: Option<&str>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "what-if service listening");
    axum::serve(listener, router(state, cors_origin))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
