//! HTTP service for the instruct-and-re-predict loop. The model is frozen;
//! instructions only change the prompt embedding of a session's case.

use std::collections::{BTreeMap, HashMap};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::{Mutex, RwLock};

use dosegraph::dataset::Sample;
use dosegraph::encoders::PromptEncoder;
use dosegraph::evaluation::{evaluate_case, StructureMetrics};
use dosegraph::model::DoseModel;
use dosegraph::structures::slot_name;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn not_found(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            code: "not_found",
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            code: "bad_request",
            message: message.into(),
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            code: "internal",
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": { "code": self.code, "message": self.message } });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CaseInfo {
    pub case_id: String,
    pub prescription_dose: f64,
    pub prescription_text: String,
    pub dose_shape: [usize; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StructureCurve {
    pub slot: usize,
    pub name: String,
    pub edges_gy: Vec<f64>,
    pub predicted: Vec<f64>,
    /// Present when the case carries a ground-truth dose.
    #[serde(rename = "true")]
    pub truth: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NamedMetrics {
    pub name: String,
    #[serde(flatten)]
    pub metrics: StructureMetrics,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HistoryEntry {
    pub seq: usize,
    pub instruction: String,
    pub mse: Option<f64>,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SessionView {
    pub session_id: String,
    pub case_id: String,
    pub prompt_text: String,
    pub predictions: Vec<f64>,
    pub structures: Vec<StructureCurve>,
    pub metrics: Vec<NamedMetrics>,
    pub mse: Option<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
struct Session {
    view: SessionView,
    history: Vec<HistoryEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum JournalEntry {
    Create {
        session_id: String,
        case_id: String,
        timestamp: u64,
    },
    Instruct {
        session_id: String,
        text: String,
        timestamp: u64,
    },
}

pub struct AppState {
    model: Arc<dyn DoseModel>,
    /// Cases keyed by id with an empty prompt attached.
    cases: BTreeMap<String, Sample>,
    infos: Vec<CaseInfo>,
    encoder: PromptEncoder,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    next_id: AtomicU64,
    journal: Option<std::sync::Mutex<std::fs::File>>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl AppState {
    /// Prepares the cases and replays `journal` when it already exists.
    pub fn new(
        model: Box<dyn DoseModel>,
        cases: &[dosegraph::bundle::CaseBundle],
        threshold: f64,
        encoder: PromptEncoder,
        journal: Option<PathBuf>,
    ) -> anyhow::Result<Arc<Self>> {
        let hashed = PromptEncoder::hashed(encoder.width);
        let mut samples = BTreeMap::new();
        let mut infos = Vec::new();
        for c in cases {
            let (s, _) = Sample::from_case(c, threshold, &hashed, "")?;
            infos.push(CaseInfo {
                case_id: c.case_id.clone(),
                prescription_dose: c.prescription_dose,
                prescription_text: c.prescription_text.clone(),
                dose_shape: c.dose_geom.shape(),
            });
            samples.insert(c.case_id.clone(), s);
        }
        infos.sort_by(|a, b| a.case_id.cmp(&b.case_id));
        let replay = match &journal {
            Some(path) if path.exists() => std::fs::read_to_string(path)?,
            _ => String::new(),
        };
        let file = journal
            .map(|p| OpenOptions::new().create(true).append(true).open(&p))
            .transpose()?;
        let state = Arc::new(Self {
            model: Arc::from(model),
            cases: samples,
            infos,
            encoder,
            sessions: RwLock::new(HashMap::new()),
            next_id: AtomicU64::new(1),
            journal: file.map(std::sync::Mutex::new),
        });
        state.replay(&replay)?;
        Ok(state)
    }

    fn replay(&self, text: &str) -> anyhow::Result<()> {
        let mut sessions = self.sessions.try_write()?;
        let mut max_id = 0;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            match serde_json::from_str::<JournalEntry>(line)? {
                JournalEntry::Create {
                    session_id,
                    case_id,
                    ..
                } => {
                    let view = self.render(&session_id, &case_id, "", Vec::new()).map_err(|e| anyhow::anyhow!(e.message))?;
                    if let Some(n) = session_id.strip_prefix('s').and_then(|n| n.parse::<u64>().ok()) {
                        max_id = max_id.max(n);
                    }
                    sessions.insert(session_id, Arc::new(Mutex::new(Session { view, history: Vec::new() })));
                }
                JournalEntry::Instruct {
                    session_id,
                    text,
                    timestamp,
                } => {
                    let session = sessions
                        .get(&session_id)
                        .ok_or_else(|| anyhow::anyhow!("journal instructs unknown session {session_id}"))?;
                    let mut s = session.try_lock()?;
                    self.apply_instruction(&mut s, &text, timestamp).map_err(|e| anyhow::anyhow!(e.message))?;
                }
            }
        }
        self.next_id.store(max_id + 1, Ordering::SeqCst);
        Ok(())
    }

    fn log_journal(&self, entry: &JournalEntry) -> ApiResult<()> {
        if let Some(file) = &self.journal {
            let line = serde_json::to_string(entry).map_err(|e| ApiError::internal(e.to_string()))?;
            let mut f = file.lock().map_err(|_| ApiError::internal("journal lock poisoned"))?;
            writeln!(f, "{line}").map_err(|e| ApiError::internal(format!("journal write failed: {e}")))?;
        }
        Ok(())
    }

    /// Predicts `case_id` under `text` and assembles the session view.
    fn render(&self, session_id: &str, case_id: &str, text: &str, mut warnings: Vec<String>) -> ApiResult<SessionView> {
        let base = self
            .cases
            .get(case_id)
            .ok_or_else(|| ApiError::not_found(format!("unknown case `{case_id}`")))?;
        let (embedding, warning) = self.encoder.encode(text);
        warnings.extend(warning);
        let sample = base.with_prompt(text, embedding).map_err(|e| ApiError::internal(e.to_string()))?;
        let predictions = self.model.predict(&sample).map_err(|e| ApiError::internal(e.to_string()))?;
        let eval = evaluate_case(&sample, &predictions).map_err(|e| ApiError::internal(e.to_string()))?;
        let structures = eval
            .predicted
            .iter()
            .map(|p| StructureCurve {
                slot: p.slot,
                name: slot_name(p.slot).to_string(),
                edges_gy: p.edges_gy.clone(),
                predicted: p.values.clone(),
                truth: eval.truth.iter().find(|t| t.slot == p.slot).map(|t| t.values.clone()),
            })
            .collect();
        let metrics = eval
            .metrics
            .iter()
            .map(|m| NamedMetrics {
                name: slot_name(m.slot).to_string(),
                metrics: m.clone(),
            })
            .collect();
        Ok(SessionView {
            session_id: session_id.to_string(),
            case_id: case_id.to_string(),
            prompt_text: text.to_string(),
            predictions,
            structures,
            metrics,
            mse: Some(eval.mse),
            warnings,
        })
    }

    fn apply_instruction(&self, session: &mut Session, text: &str, timestamp: u64) -> ApiResult<()> {
        let view = self.render(&session.view.session_id, &session.view.case_id, text, Vec::new())?;
        session.history.push(HistoryEntry {
            seq: session.history.len() + 1,
            instruction: text.to_string(),
            mse: view.mse,
            timestamp,
            warnings: view.warnings.clone(),
        });
        session.view = view;
        Ok(())
    }

    async fn session(&self, id: &str) -> ApiResult<Arc<Mutex<Session>>> {
        self.sessions
            .read()
            .await
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown session `{id}`")))
    }
}

fn parse_body<T: serde::de::DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed request body: {e}")))
}

async fn list_cases(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({ "cases": state.infos }))
}

#[derive(Deserialize)]
struct CreateSession {
    case_id: String,
}

#[derive(Deserialize)]
struct Instruct {
    text: String,
}

async fn create_session(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<(StatusCode, Json<SessionView>)> {
    let req: CreateSession = parse_body(&body)?;
    if !state.cases.contains_key(&req.case_id) {
        return Err(ApiError::not_found(format!("unknown case `{}`", req.case_id)));
    }
    let id = format!("s{}", state.next_id.fetch_add(1, Ordering::SeqCst));
    let st = state.clone();
    let (sid, cid) = (id.clone(), req.case_id.clone());
    let view = tokio::task::spawn_blocking(move || st.render(&sid, &cid, "", Vec::new()))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    state.log_journal(&JournalEntry::Create {
        session_id: id.clone(),
        case_id: req.case_id,
        timestamp: now(),
    })?;
    let session = Session {
        view: view.clone(),
        history: Vec::new(),
    };
    state.sessions.write().await.insert(id, Arc::new(Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(view)))
}

#[derive(Serialize)]
struct CdvhView<'a> {
    session_id: &'a str,
    case_id: &'a str,
    prompt_text: &'a str,
    structures: &'a [StructureCurve],
}

async fn get_cdvh(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    let session = state.session(&id).await?;
    let s = session.lock().await;
    let view = CdvhView {
        session_id: &s.view.session_id,
        case_id: &s.view.case_id,
        prompt_text: &s.view.prompt_text,
        structures: &s.view.structures,
    };
    Ok(Json(serde_json::to_value(view).map_err(|e| ApiError::internal(e.to_string()))?))
}

async fn instruct(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<SessionView>> {
    let session = state.session(&id).await?;
    let req: Instruct = parse_body(&body)?;
    // Holding the session lock serializes instructions per session.
    let mut guard = session.clone().lock_owned().await;
    let st = state.clone();
    let text = req.text.clone();
    let timestamp = now();
    let guard = tokio::task::spawn_blocking(move || {
        st.apply_instruction(&mut guard, &text, timestamp).map(|_| guard)
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))??;
    state.log_journal(&JournalEntry::Instruct {
        session_id: id,
        text: req.text,
        timestamp,
    })?;
    Ok(Json(guard.view.clone()))
}

async fn history(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    let session = state.session(&id).await?;
    let s = session.lock().await;
    Ok(Json(json!({ "session_id": id, "case_id": s.view.case_id, "entries": s.history })))
}

async fn fallback() -> ApiError {
    ApiError::not_found("no such endpoint")
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/cases", get(list_cases))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/cdvh", get(get_cdvh))
        .route("/sessions/{id}/instruct", post(instruct))
        .route("/sessions/{id}/history", get(history))
        .fallback(fallback)
        .with_state(state)
}

pub async fn serve(addr: &str, state: Arc<AppState>) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}
