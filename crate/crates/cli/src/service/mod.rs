//! HTTP service running the Retrieve, Reuse, Revise and Retain loop.
//!
//! Cases are the only durable truth: every retain is written and synced to
//! the case bank before the response. Sessions live in memory and are
//! journaled on each transition so a restart can resume open reviews.

mod session;

use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cbr_core::bank::{Case, CaseBank, CaseId, NewCase, Provenance};
use cbr_core::retrieval::{Embedder, RetrievalError, RetrievalIndex};
use cbr_core::reuse::{GenerationRequest, RetrievedCase, ReuseEngine, ReuseError};
use cbr_core::script::detect_repetition_default;
use cbr_core::ScriptSource;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

pub use session::{CaseSummary, Session, SessionStatus, SessionTable, StatusCounts};

use crate::config::Settings;

/// Variable that makes the server abort right after a retained case is
/// durable and before anything else happens. Used by crash tests.
pub const FAULT_ENV: &str = "CBR_FAULT_ABORT_AFTER_CASE_WRITE";

/// Called with the new case id once the case is durable, before the session
/// update and response.
pub type FaultHook = Arc<dyn Fn(&CaseId) + Send + Sync>;

pub const RETRY_AFTER_SECS: u64 = 5;
pub const METRICS_WINDOW: usize = 50;
pub const MAX_PAGE: usize = 500;

struct Store {
    bank: CaseBank,
    index: RetrievalIndex,
}

pub struct AppState {
    m: usize,
    store: RwLock<Store>,
    sessions: Mutex<SessionTable>,
    embedder: Embedder,
    engine: ReuseEngine,
    fault: Option<FaultHook>,
}

impl AppState {
    pub fn new(bank: CaseBank, sessions: SessionTable, embedder: Embedder, engine: ReuseEngine, m: usize) -> anyhow::Result<Self> {
        let index = RetrievalIndex::build(&bank.view(), &embedder)?;
        Ok(Self {
            m,
            store: RwLock::new(Store { bank, index }),
            sessions: Mutex::new(sessions),
            embedder,
            engine,
            fault: None,
        })
    }

    /// Open the bank and session journal named by `settings`.
    pub fn open(settings: &Settings) -> anyhow::Result<Self> {
        let bank = CaseBank::open(&settings.bank_path)?;
        let sessions = SessionTable::open(&settings.journal_path(), &bank)?;
        tracing::info!(
            bank = %settings.bank_path.display(),
            cases = bank.len(),
            sessions = sessions.counts().total,
            "state loaded"
        );
        let mut state = Self::new(bank, sessions, settings.embedder()?, settings.engine(), settings.retrieval_m)?;
        if std::env::var(FAULT_ENV).is_ok_and(|v| !v.is_empty() && v != "0") {
            tracing::warn!("{FAULT_ENV} set: the process aborts after the next case write");
            state.fault = Some(Arc::new(|_: &CaseId| std::process::abort()));
        }
        Ok(state)
    }

    pub fn with_fault_hook(mut self, hook: FaultHook) -> Self {
        self.fault = Some(hook);
        self
    }

    pub fn bank_len(&self) -> usize {
        self.store.read().bank.len()
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn unknown_session(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "unknown_session", format!("no session {id}"))
    }

    fn conflict(session: &Session) -> Self {
        let message = match &session.case_id {
            Some(case) => format!("session {} is {:?}; case {case}", session.id, session.status),
            None => format!("session {} is {:?}", session.id, session.status),
        };
        let code = match session.status {
            SessionStatus::Retained => "already_retained",
            _ => "already_discarded",
        };
        Self::new(StatusCode::CONFLICT, code, message.to_lowercase())
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
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
        let body = Json(ErrorBody {
            error: ErrorDetail {
                code: self.code,
                message: &self.message,
            },
        });
        if self.status == StatusCode::SERVICE_UNAVAILABLE {
            (self.status, [(header::RETRY_AFTER, RETRY_AFTER_SECS.to_string())], body).into_response()
        } else {
            (self.status, body).into_response()
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_body", e.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_query", e.body_text())
    }
}

impl From<RetrievalError> for ApiError {
    fn from(e: RetrievalError) -> Self {
        if e.is_retryable() {
            Self::new(StatusCode::SERVICE_UNAVAILABLE, "embedding_unavailable", e.to_string())
        } else {
            Self::internal(e)
        }
    }
}

impl From<ReuseError> for ApiError {
    fn from(e: ReuseError) -> Self {
        match e {
            ReuseError::LlmServiceUnavailable(_) => {
                Self::new(StatusCode::SERVICE_UNAVAILABLE, "llm_unavailable", e.to_string())
            }
            ReuseError::ContextOverflow { .. } => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "context_overflow", e.to_string())
            }
            ReuseError::MissingReference(_) => Self::internal(e),
        }
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)?.map(Json)
}

#[derive(Debug, Deserialize)]
pub struct GenerateBody {
    pub intent: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub session_id: String,
    pub retrieved: Vec<CaseSummary>,
    pub draft: String,
    pub low_confidence: bool,
    pub bank_revision: u64,
}

fn generate(state: &AppState, intent: String) -> Result<GenerateResponse, ApiError> {
    let intent = intent.trim().to_string();
    if intent.is_empty() {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "empty_intent", "intent must not be empty"));
    }
    let query = state.embedder.embed(&intent)?;
    let (retrieved, revision) = {
        let store = state.store.read();
        let retrieved: Vec<RetrievedCase> = if store.index.is_empty() {
            Vec::new()
        } else {
            store
                .index
                .top_k(&query, state.m, None)?
                .entries
                .into_iter()
                .map(|e| RetrievedCase {
                    case: store.bank.get(&e.case_id).expect("index matches bank").clone(),
                    similarity: e.similarity,
                })
                .collect()
        };
        (retrieved, store.bank.revision())
    };
    let record = state.engine.generate(&GenerationRequest::new(intent.clone(), retrieved))?;
    let session = Session {
        id: uuid::Uuid::new_v4().simple().to_string(),
        intent,
        retrieved: record
            .request
            .retrieved
            .iter()
            .map(|r| CaseSummary {
                id: r.case.id.clone(),
                intent: r.case.intent.clone(),
                script: r.case.script.clone(),
                source: r.case.source,
                similarity: r.similarity,
            })
            .collect(),
        repetitive_draft: detect_repetition_default(&ScriptSource::new(record.draft.as_str())).is_repetitive,
        draft: record.draft,
        generator_id: record.generator_id,
        bank_revision: revision,
        low_confidence: record.request.retrieved.is_empty(),
        status: SessionStatus::Drafted,
        revised_script: None,
        final_script: None,
        case_id: None,
    };
    let response = GenerateResponse {
        session_id: session.id.clone(),
        retrieved: session.retrieved.clone(),
        draft: session.draft.clone(),
        low_confidence: session.low_confidence,
        bank_revision: revision,
    };
    state.sessions.lock().insert(session);
    Ok(response)
}

#[derive(Debug, Default, Deserialize)]
pub struct RetainBody {
    /// Defaults to the latest revision, else the draft.
    #[serde(default)]
    pub final_script: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RetainResponse {
    pub case_id: CaseId,
    pub source: Provenance,
}

fn retain(state: &AppState, id: &str, body: RetainBody) -> Result<RetainResponse, ApiError> {
    let mut sessions = state.sessions.lock();
    let session = sessions.get(id).ok_or_else(|| ApiError::unknown_session(id))?;
    if !session.status.is_open() {
        return Err(ApiError::conflict(session));
    }
    let final_script = body
        .final_script
        .or_else(|| session.revised_script.clone())
        .unwrap_or_else(|| session.draft.clone());
    let source = if final_script == session.draft {
        Provenance::Retained
    } else {
        Provenance::Revised
    };
    let case_id = session.case_id();
    let new = NewCase::new(session.intent.clone(), final_script.clone(), source).with_id(case_id.clone());
    {
        let mut store = state.store.write();
        let case = store.bank.retain(new).map_err(ApiError::internal)?;
        let Store { index, .. } = &mut *store;
        if let Err(e) = index.push(&case, &state.embedder) {
            tracing::error!(case = %case.id, error = %e, "retained case not indexed until restart");
        }
    }
    if let Some(fault) = &state.fault {
        fault(&case_id);
    }
    sessions.update(id, |s| {
        s.status = SessionStatus::Retained;
        s.final_script = Some(final_script);
        s.case_id = Some(case_id.clone());
    });
    Ok(RetainResponse { case_id, source })
}

#[derive(Debug, Deserialize)]
pub struct ReviseBody {
    pub script: String,
}

fn revise(state: &AppState, id: &str, script: String) -> Result<Session, ApiError> {
    let mut sessions = state.sessions.lock();
    let session = sessions.get(id).ok_or_else(|| ApiError::unknown_session(id))?;
    if !session.status.is_open() {
        return Err(ApiError::conflict(session));
    }
    Ok(sessions
        .update(id, |s| {
            s.status = SessionStatus::Revised;
            s.revised_script = Some(script);
        })
        .expect("session exists"))
}

fn discard(state: &AppState, id: &str) -> Result<Session, ApiError> {
    let mut sessions = state.sessions.lock();
    let session = sessions.get(id).ok_or_else(|| ApiError::unknown_session(id))?;
    if !session.status.is_open() {
        return Err(ApiError::conflict(session));
    }
    Ok(sessions
        .update(id, |s| s.status = SessionStatus::Discarded)
        .expect("session exists"))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DraftVsFinal {
    pub count: usize,
    pub mean: Option<f64>,
    pub window: usize,
    pub rolling_mean: Option<f64>,
    pub series: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BankStats {
    pub size: usize,
    pub revision: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Metrics {
    pub sessions: SessionCounts,
    pub drafts: usize,
    pub repetitive_drafts: usize,
    pub repetition_rate: f64,
    pub draft_vs_final_ff1: DraftVsFinal,
    pub bank: BankStats,
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct SessionCounts {
    pub drafted: usize,
    pub revised: usize,
    pub retained: usize,
    pub discarded: usize,
    pub total: usize,
}

fn metrics(state: &AppState) -> Metrics {
    let sessions = state.sessions.lock();
    let counts = sessions.counts();
    let series = sessions.ff1_series.clone();
    let mean = |xs: &[f64]| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    let window = &series[series.len().saturating_sub(METRICS_WINDOW)..];
    let store = state.store.read();
    Metrics {
        sessions: SessionCounts {
            drafted: counts.drafted,
            revised: counts.revised,
            retained: counts.retained,
            discarded: counts.discarded,
            total: counts.total,
        },
        drafts: sessions.drafts,
        repetitive_drafts: sessions.repetitive_drafts,
        repetition_rate: if sessions.drafts == 0 {
            0.0
        } else {
            sessions.repetitive_drafts as f64 / sessions.drafts as f64
        },
        draft_vs_final_ff1: DraftVsFinal {
            count: series.len(),
            mean: mean(&series),
            window: METRICS_WINDOW,
            rolling_mean: mean(window),
            series,
        },
        bank: BankStats {
            size: store.bank.len(),
            revision: store.bank.revision(),
        },
    }
}

#[derive(Debug, Deserialize)]
pub struct PageQuery {
    #[serde(default)]
    pub offset: usize,
    #[serde(default = "default_limit")]
    pub limit: usize,
}

fn default_limit() -> usize {
    50
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CasePage {
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
    pub revision: u64,
    pub cases: Vec<Case>,
}

fn list_cases(state: &AppState, page: PageQuery) -> Result<CasePage, ApiError> {
    if page.limit == 0 || page.limit > MAX_PAGE {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "invalid_query",
            format!("limit must be in 1..={MAX_PAGE}"),
        ));
    }
    let store = state.store.read();
    Ok(CasePage {
        total: store.bank.len(),
        offset: page.offset,
        limit: page.limit,
        revision: store.bank.revision(),
        cases: store.bank.cases().skip(page.offset).take(page.limit).cloned().collect(),
    })
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route(
            "/v1/generate",
            post(|State(s): State<Arc<AppState>>, body: Result<Json<GenerateBody>, JsonRejection>| async move {
                let Json(body) = body?;
                blocking(move || generate(&s, body.intent)).await
            }),
        )
        .route(
            "/v1/sessions/{id}",
            get(|State(s): State<Arc<AppState>>, Path(id): Path<String>| async move {
                s.sessions
                    .lock()
                    .get(&id)
                    .cloned()
                    .map(Json)
                    .ok_or_else(|| ApiError::unknown_session(&id))
            }),
        )
        .route(
            "/v1/sessions/{id}/revise",
            post(
                |State(s): State<Arc<AppState>>, Path(id): Path<String>, body: Result<Json<ReviseBody>, JsonRejection>| async move {
                    let Json(body) = body?;
                    blocking(move || revise(&s, &id, body.script)).await
                },
            ),
        )
        .route(
            "/v1/sessions/{id}/retain",
            post(
                |State(s): State<Arc<AppState>>, Path(id): Path<String>, body: Result<Json<RetainBody>, JsonRejection>| async move {
                    let Json(body) = body?;
                    blocking(move || retain(&s, &id, body)).await
                },
            ),
        )
        .route(
            "/v1/sessions/{id}/discard",
            post(|State(s): State<Arc<AppState>>, Path(id): Path<String>| async move {
                blocking(move || discard(&s, &id)).await
            }),
        )
        .route(
            "/v1/metrics",
            get(|State(s): State<Arc<AppState>>| async move { Json(metrics(&s)) }),
        )
        .route(
            "/v1/cases",
            get(|State(s): State<Arc<AppState>>, page: Result<Query<PageQuery>, QueryRejection>| async move {
                let Query(page) = page?;
                list_cases(&s, page).map(Json)
            }),
        )
        .route(
            "/v1/cases/{id}",
            get(|State(s): State<Arc<AppState>>, Path(id): Path<String>| async move {
                s.store
                    .read()
                    .bank
                    .get(&CaseId::new(id.as_str()))
                    .cloned()
                    .map(Json)
                    .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_case", format!("no case {id}")))
            }),
        )
        .with_state(state)
}

/// Bind and serve until Ctrl-C. Prints `listening on <addr>` once bound.
pub async fn serve(state: AppState, host: &str, port: u16) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind((host, port)).await?;
    let addr = listener.local_addr()?;
    println!("listening on {addr}");
    use std::io::Write;
    std::io::stdout().flush()?;
    axum::serve(listener, router(Arc::new(state)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
