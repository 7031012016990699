//! HTTP API: survey definitions, response ingestion and participant
//! lifecycle endpoints, all behind `X-Api-Key`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ema_core::notify::Clock;
use ema_core::ratelimit::{Decision, RateLimiter};
use ema_core::registry::{Answers, EligibilityRule, RegistryError};
use ema_core::{ResponsePayload, Survey, SurveyDefinition, Timestamp};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::net::TcpListener;

use crate::config::Config;
use crate::keys::{ApiKey, AuthError, KeyStore, KeyStoreError};
use crate::registry::{ParticipantView, Registry, RegistryStoreError};
use crate::store::{Store, StoreError, Stream};

pub const API_KEY_HEADER: &str = "x-api-key";
pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";
pub const REPLAY_HEADER: &str = "idempotent-replayed";

#[derive(Debug, Error)]
pub enum SetupError {
    #[error("{path}: {reason}")]
    Survey { path: String, reason: String },
    #[error("duplicate survey id {0:?}")]
    DuplicateSurvey(String),
    #[error("{path}: {reason}")]
    Eligibility { path: String, reason: String },
    #[error(transparent)]
    Keys(#[from] KeyStoreError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Registry(#[from] RegistryStoreError),
}

/// Machine-readable error body: `{"error": code, "violations": [...]}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub violations: Vec<Value>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str) -> Self {
        ApiError {
            status,
            code,
            violations: Vec::new(),
        }
    }

    fn with(mut self, violations: Vec<Value>) -> Self {
        self.violations = violations;
        self
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        tracing::error!(error = %e, "request failed");
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "storageFailure")
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": self.code, "violations": self.violations });
        (self.status, Json(body)).into_response()
    }
}

impl From<AuthError> for ApiError {
    fn from(_: AuthError) -> Self {
        ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized")
    }
}

impl From<RegistryStoreError> for ApiError {
    fn from(e: RegistryStoreError) -> Self {
        let RegistryStoreError::Rule(rule) = e else {
            return ApiError::internal(e);
        };
        let (status, code) = match rule {
            RegistryError::InvalidId | RegistryError::UnknownParticipant => {
                (StatusCode::NOT_FOUND, "unknownParticipant")
            }
            RegistryError::InvalidEmail => (StatusCode::UNPROCESSABLE_ENTITY, "invalidEmail"),
            RegistryError::WeakPassword => (StatusCode::UNPROCESSABLE_ENTITY, "weakPassword"),
            RegistryError::DuplicateEmail => (StatusCode::CONFLICT, "duplicateEmail"),
            RegistryError::AlreadyScreened => (StatusCode::CONFLICT, "alreadyScreened"),
            RegistryError::NotEligible => (StatusCode::CONFLICT, "notEligible"),
            RegistryError::AlreadyConsented => (StatusCode::CONFLICT, "alreadyConsented"),
            RegistryError::NoConsent => (StatusCode::CONFLICT, "noConsent"),
        };
        ApiError::new(status, code)
    }
}

/// A validated definition together with the exact bytes served for it.
pub struct SurveyDoc {
    pub survey: Survey,
    pub document: Bytes,
}

impl SurveyDoc {
    pub fn new(survey: Survey) -> Self {
        let document = serde_json::to_vec_pretty(survey.definition()).expect("definitions serialize");
        SurveyDoc {
            survey,
            document: document.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Receipt {
    pub response_id: u64,
    pub stored_at: Timestamp,
}

#[derive(Clone, Copy)]
struct IdemEntry {
    digest: [u8; 32],
    receipt: Receipt,
}

type IdemSlot = Arc<tokio::sync::Mutex<Option<IdemEntry>>>;

/// What is written to the response stream: the payload plus server fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StoredResponse {
    #[serde(flatten)]
    pub payload: ResponsePayload,
    pub option_indices: BTreeMap<String, usize>,
    pub stored_at: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idempotency_key: Option<String>,
}

fn payload_digest(payload: &ResponsePayload) -> [u8; 32] {
    Sha256::digest(serde_json::to_vec(payload).expect("payloads serialize")).into()
}

pub struct AppState {
    surveys: HashMap<String, Arc<SurveyDoc>>,
    keys: KeyStore,
    limiter: Mutex<RateLimiter>,
    store: Arc<Store>,
    registry: Arc<Registry>,
    clock: Arc<dyn Clock + Send + Sync>,
    idempotency: Mutex<HashMap<String, IdemSlot>>,
}

impl AppState {
    /// Builds state and reloads idempotency receipts from the response stream.
    pub fn new(
        surveys: Vec<Survey>,
        keys: KeyStore,
        rate_default: u32,
        store: Arc<Store>,
        registry: Arc<Registry>,
        clock: Arc<dyn Clock + Send + Sync>,
    ) -> Result<AppState, SetupError> {
        let mut by_id = HashMap::new();
        for s in surveys {
            let id = s.survey_id().to_owned();
            if by_id.insert(id.clone(), Arc::new(SurveyDoc::new(s))).is_some() {
                return Err(SetupError::DuplicateSurvey(id));
            }
        }
        let mut limiter = RateLimiter::new();
        for k in keys.keys() {
            limiter.register(k.key_id.clone(), k.rate_per_hour.unwrap_or(rate_default));
        }
        let mut idempotency = HashMap::new();
        for rec in store.scan(Stream::Responses)? {
            let Ok(stored) = serde_json::from_value::<StoredResponse>(rec.body) else {
                continue;
            };
            if let Some(token) = stored.idempotency_key {
                let entry = IdemEntry {
                    digest: payload_digest(&stored.payload),
                    receipt: Receipt {
                        response_id: rec.record_id,
                        stored_at: stored.stored_at,
                    },
                };
                idempotency.insert(token, Arc::new(tokio::sync::Mutex::new(Some(entry))));
            }
        }
        Ok(AppState {
            surveys: by_id,
            keys,
            limiter: Mutex::new(limiter),
            store,
            registry,
            clock,
            idempotency: Mutex::new(idempotency),
        })
    }

    /// Loads surveys, keys, store and registry named by `cfg`.
    pub fn from_config(cfg: &Config, clock: Arc<dyn Clock + Send + Sync>) -> Result<AppState, SetupError> {
        let surveys = cfg
            .surveys
            .iter()
            .map(|p| load_survey(p))
            .collect::<Result<Vec<_>, _>>()?;
        let keys = KeyStore::load(&cfg.key_store)?;
        let rule = match &cfg.eligibility {
            Some(p) => load_eligibility(p)?,
            None => EligibilityRule::illustrative_default(),
        };
        let store = Arc::new(Store::open(&cfg.data_dir)?);
        let registry = Arc::new(Registry::open(&cfg.registry_dir, rule, cfg.credential_hash)?);
        AppState::new(surveys, keys, cfg.rate_default, store, registry, clock)
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.registry
    }

    fn authenticate(&self, headers: &HeaderMap) -> Result<&ApiKey, ApiError> {
        let raw = headers.get(API_KEY_HEADER).map(|v| v.to_str().unwrap_or(""));
        Ok(self.keys.authenticate(raw)?)
    }
}

pub fn load_survey(path: &Path) -> Result<Survey, SetupError> {
    let err = |reason: String| SetupError::Survey {
        path: path.display().to_string(),
        reason,
    };
    let bytes = fs::read(path).map_err(|e| err(e.to_string()))?;
    let def: SurveyDefinition = serde_json::from_slice(&bytes).map_err(|e| err(e.to_string()))?;
    Survey::new(def).map_err(|e| err(e.to_string()))
}

pub fn load_eligibility(path: &Path) -> Result<EligibilityRule, SetupError> {
    let err = |reason: String| SetupError::Eligibility {
        path: path.display().to_string(),
        reason,
    };
    let bytes = fs::read(path).map_err(|e| err(e.to_string()))?;
    serde_json::from_slice(&bytes).map_err(|e| err(e.to_string()))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/v1/surveys/{survey_id}", get(get_survey))
        .route("/api/v1/responses", post(post_response))
        .route("/api/v1/participants", post(register))
        .route("/api/v1/participants/{id}", get(get_participant))
        .route("/api/v1/participants/{id}/screening", post(screen))
        .route("/api/v1/participants/{id}/consent", post(consent))
        .route("/api/v1/participants/{id}/onboarding", post(onboarding))
        .route("/api/v1/participants/{id}/push-token", post(push_token))
        .route("/api/v1/participants/{id}/consent-receipt", get(consent_receipt))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "notFound") })
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    state: Arc<AppState>,
    listener: TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)
}

fn parse_json<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalidPayload")
            .with(vec![json!({"code": "malformedJson", "detail": e.to_string()})])
    })
}

async fn get_survey(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    UrlPath(survey_id): UrlPath<String>,
) -> Result<Response, ApiError> {
    state.authenticate(&headers)?;
    let doc = state
        .surveys
        .get(&survey_id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknownSurvey"))?;
    Ok((
        [(header::CONTENT_TYPE, HeaderValue::from_static("application/json"))],
        doc.document.clone(),
    )
        .into_response())
}

fn invalid(violations: Vec<Value>) -> ApiError {
    ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalidPayload").with(violations)
}

async fn post_response(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Response, ApiError> {
    let key_id = state.authenticate(&headers)?.key_id.clone();
    let token = match headers.get(IDEMPOTENCY_HEADER) {
        None => None,
        Some(v) => Some(
            v.to_str()
                .ok()
                .and_then(|s| uuid::Uuid::parse_str(s.trim()).ok())
                .map(|u| u.hyphenated().to_string())
                .ok_or_else(|| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalidIdempotencyKey"))?,
        ),
    };
    let payload: ResponsePayload = parse_json(&body)?;
    let digest = payload_digest(&payload);

    let slot = token.as_ref().map(|t| {
        state
            .idempotency
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .entry(t.clone())
            .or_default()
            .clone()
    });
    let mut guard = match &slot {
        Some(s) => Some(s.clone().lock_owned().await),
        None => None,
    };
    if let Some(Some(entry)) = guard.as_deref() {
        if entry.digest != digest {
            return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "idempotencyKeyReused"));
        }
        let mut resp = (StatusCode::CREATED, Json(entry.receipt)).into_response();
        resp.headers_mut().insert(REPLAY_HEADER, HeaderValue::from_static("true"));
        return Ok(resp);
    }

    let now = state.clock.now();
    let decision = state
        .limiter
        .lock()
        .unwrap_or_else(|p| p.into_inner())
        .check(&key_id, now)
        .map_err(ApiError::internal)?;
    if decision == Decision::Deny {
        return Err(ApiError::new(StatusCode::TOO_MANY_REQUESTS, "rateLimited"));
    }

    let doc = state
        .surveys
        .get(&payload.survey_id)
        .cloned()
        .ok_or_else(|| invalid(vec![json!({"code": "unknownSurvey", "surveyId": payload.survey_id})]))?;
    if doc.survey.version() != payload.survey_version {
        return Err(ApiError::new(StatusCode::CONFLICT, "versionMismatch").with(vec![json!({
            "code": "versionMismatch",
            "current": doc.survey.version(),
            "submitted": payload.survey_version,
        })]));
    }
    let path = payload.validate(&doc.survey).map_err(|vs| {
        invalid(vs.iter().map(|v| serde_json::to_value(v).expect("violations serialize")).collect())
    })?;
    let registry = state.registry.clone();
    let pid = payload.participant_id.clone();
    if !blocking(move || registry.has_consented(&pid)).await? {
        return Err(invalid(vec![json!({"code": "participantNotConsented"})]));
    }

    let stored = StoredResponse {
        option_indices: path.into_iter().map(|e| (e.identifier, e.option_index)).collect(),
        stored_at: now,
        idempotency_key: token,
        payload,
    };
    let timestamp = stored.payload.submitted_at;
    let body = serde_json::to_value(&stored).expect("stored responses serialize");
    let store = state.store.clone();
    let response_id = blocking(move || store.append(Stream::Responses, timestamp, body))
        .await?
        .map_err(ApiError::internal)?;
    let receipt = Receipt {
        response_id,
        stored_at: now,
    };
    if let Some(g) = guard.as_deref_mut() {
        *g = Some(IdemEntry { digest, receipt });
    }
    Ok((StatusCode::CREATED, Json(receipt)).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RegisterBody {
    email: String,
    password: String,
}

async fn register(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Response, ApiError> {
    state.authenticate(&headers)?;
    let req: RegisterBody = parse_json(&body)?;
    let registry = state.registry.clone();
    let p = blocking(move || registry.register(&req.email, &req.password)).await??;
    Ok((StatusCode::CREATED, Json(ParticipantView::from(&p))).into_response())
}

async fn get_participant(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<ParticipantView>, ApiError> {
    state.authenticate(&headers)?;
    let p = state
        .registry
        .get(&id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknownParticipant"))?;
    Ok(Json(ParticipantView::from(&p)))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AnswersBody {
    answers: Answers,
}

async fn screen(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    state.authenticate(&headers)?;
    let req: AnswersBody = parse_json(&body)?;
    let registry = state.registry.clone();
    let verdict = blocking(move || registry.screen(&id, &req.answers)).await??;
    let failing: Vec<String> = verdict.failing.iter().map(ToString::to_string).collect();
    Ok(Json(json!({"eligibility": verdict.eligibility, "failing": failing})).into_response())
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct ConsentBody {
    signature_name: String,
    document_version: String,
}

async fn consent(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<ParticipantView>, ApiError> {
    state.authenticate(&headers)?;
    let req: ConsentBody = parse_json(&body)?;
    if req.signature_name.trim().is_empty() || req.document_version.trim().is_empty() {
        return Err(invalid(vec![json!({"code": "emptyConsentField"})]));
    }
    let now = state.clock.now();
    let registry = state.registry.clone();
    let p = blocking(move || registry.record_consent(&id, &req.signature_name, &req.document_version, now)).await??;
    Ok(Json(ParticipantView::from(&p)))
}

async fn onboarding(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<ParticipantView>, ApiError> {
    state.authenticate(&headers)?;
    let req: AnswersBody = parse_json(&body)?;
    let registry = state.registry.clone();
    let p = blocking(move || registry.record_onboarding(&id, req.answers)).await??;
    Ok(Json(ParticipantView::from(&p)))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TokenBody {
    token: String,
}

async fn push_token(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<ParticipantView>, ApiError> {
    state.authenticate(&headers)?;
    let req: TokenBody = parse_json(&body)?;
    if req.token.trim().is_empty() {
        return Err(invalid(vec![json!({"code": "emptyPushToken"})]));
    }
    let registry = state.registry.clone();
    let p = blocking(move || registry.register_push_token(&id, &req.token)).await??;
    Ok(Json(ParticipantView::from(&p)))
}

async fn consent_receipt(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    UrlPath(id): UrlPath<String>,
) -> Result<Response, ApiError> {
    state.authenticate(&headers)?;
    let p = state
        .registry
        .get(&id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknownParticipant"))?;
    let receipt = p
        .consent_receipt()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "noConsent"))?;
    Ok((
        [(header::CONTENT_TYPE, HeaderValue::from_static("text/plain; charset=utf-8"))],
        receipt,
    )
        .into_response())
}
