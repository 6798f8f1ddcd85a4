//! HTTP API over three loaded mechanism models.
//!
//! | method | path        | body                                                 |
//! |--------|-------------|------------------------------------------------------|
//! | GET    | `/health`   |                                                      |
//! | POST   | `/predict`  | `{"seeker": str, "response": str}`                   |
//! | POST   | `/feedback` | `{"seeker": str, "response": str, "previous_response": str?}` |
//!
//! Bodies are JSON in both directions. Every span is a half-open UTF-8 byte interval
//! into the `response` string of the request, so `response[start..end]` is the quoted text.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use axum::body::Bytes;
use axum::extract::rejection::BytesRejection;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use empathy_core::feedback::total_of;
use empathy_core::labels::{Level, Mechanism};
use empathy_core::train::checkpoint::{file_digest, load_model};
use empathy_core::{generate_feedback, FeedbackReport, FeedbackTemplateSet, Pipeline, Prediction, Vocabulary};
use serde::Serialize;
use serde_json::{json, Value};

pub const DEFAULT_BIND: &str = "127.0.0.1:8080";
pub const DEFAULT_MAX_BODY_BYTES: usize = 64 * 1024;
pub const DEFAULT_TIMEOUT_MS: u64 = 10_000;

/// Source of per-mechanism predictions. Implementations must be pure functions of their input.
pub trait Predictor: Send + Sync + 'static {
    /// One prediction per mechanism, ER, IP, EX order.
    fn predict(&self, seeker: &str, response: &str) -> empathy_core::Result<Vec<Prediction>>;

    fn model_hashes(&self) -> Vec<ModelHash>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ModelHash {
    pub mechanism: Mechanism,
    pub sha256: String,
}

/// Checkpoints loaded from disk with their file digests.
pub struct LoadedPipeline {
    pub pipeline: Pipeline<f32>,
    pub hashes: Vec<ModelHash>,
    pub vocab_hash: String,
}

/// Loads the ER, IP and EX checkpoints, in that order, against one vocabulary.
pub fn load_pipeline(vocab: &Path, checkpoints: [&Path; 3]) -> anyhow::Result<LoadedPipeline> {
    let vocabulary = Vocabulary::load(vocab)?;
    let vocab_hash = vocabulary.hash();
    let mut models = Vec::with_capacity(3);
    let mut hashes = Vec::with_capacity(3);
    for (m, path) in Mechanism::ALL.into_iter().zip(checkpoints) {
        let (model, _) = load_model::<f32>(path, Some(&vocab_hash)).with_context(|| format!("loading {}", path.display()))?;
        if model.mechanism != m {
            bail!("{} holds a {} model, expected {}", path.display(), model.mechanism, m);
        }
        models.push(model);
        hashes.push(ModelHash {
            mechanism: m,
            sha256: file_digest(path)?,
        });
    }
    Ok(LoadedPipeline {
        pipeline: Pipeline::new(vocabulary, models)?,
        hashes,
        vocab_hash,
    })
}

impl Predictor for LoadedPipeline {
    fn predict(&self, seeker: &str, response: &str) -> empathy_core::Result<Vec<Prediction>> {
        self.pipeline.predict(seeker, response)
    }

    fn model_hashes(&self) -> Vec<ModelHash> {
        self.hashes.clone()
    }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    pub vocab: PathBuf,
    /// ER, IP, EX.
    pub checkpoints: [PathBuf; 3],
    pub templates: Option<PathBuf>,
    pub max_body_bytes: usize,
    pub timeout: Duration,
}

#[derive(Clone)]
pub struct AppState {
    pub predictor: Arc<dyn Predictor>,
    pub templates: Arc<FeedbackTemplateSet>,
    pub timeout: Duration,
}

pub fn router(state: AppState, max_body_bytes: usize) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/predict", post(predict))
        .route("/feedback", post(feedback))
        .layer(DefaultBodyLimit::max(max_body_bytes))
        .with_state(state)
}

/// Loads the models, binds and serves until interrupted.
pub async fn serve(config: ServiceConfig) -> anyhow::Result<()> {
    let [er, ip, ex] = &config.checkpoints;
    let loaded = load_pipeline(&config.vocab, [er.as_path(), ip.as_path(), ex.as_path()])?;
    for h in &loaded.hashes {
        log::info!("loaded {} model sha256={}", h.mechanism, h.sha256);
    }
    let templates = match &config.templates {
        Some(p) => FeedbackTemplateSet::load(p)?,
        None => FeedbackTemplateSet::default(),
    };
    let state = AppState {
        predictor: Arc::new(loaded),
        templates: Arc::new(templates),
        timeout: config.timeout,
    };
    let listener = tokio::net::TcpListener::bind(config.bind)
        .await
        .with_context(|| format!("binding {}", config.bind))?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state, config.max_body_bytes))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

#[derive(Debug)]
pub enum ApiError {
    BadRequest { field: Option<&'static str>, message: String },
    Rejected { status: StatusCode, message: String },
    Timeout,
    Internal(String),
}

impl ApiError {
    fn field(field: &'static str, message: impl Into<String>) -> Self {
        ApiError::BadRequest {
            field: Some(field),
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        match self {
            ApiError::BadRequest { field, message } => {
                (StatusCode::BAD_REQUEST, Json(json!({ "error": message, "field": field }))).into_response()
            }
            ApiError::Rejected { status, message } => (status, Json(json!({ "error": message }))).into_response(),
            ApiError::Timeout => (
                StatusCode::GATEWAY_TIMEOUT,
                Json(json!({ "error": "inference timed out" })),
            )
                .into_response(),
            ApiError::Internal(detail) => {
                let id = uuid::Uuid::new_v4().to_string();
                log::error!("request {id} failed: {detail}");
                (
                    StatusCode::INTERNAL_SERVER_ERROR,
                    Json(json!({ "error": "internal error", "id": id })),
                )
                    .into_response()
            }
        }
    }
}

impl From<BytesRejection> for ApiError {
    fn from(r: BytesRejection) -> Self {
        let status = r.status();
        let message = if status == StatusCode::PAYLOAD_TOO_LARGE {
            "request body is too large".to_string()
        } else {
            r.body_text()
        };
        ApiError::Rejected { status, message }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairRequest {
    pub seeker: String,
    pub response: String,
    pub previous_response: Option<String>,
}

fn text_field(obj: &serde_json::Map<String, Value>, name: &'static str, required: bool) -> Result<Option<String>, ApiError> {
    match obj.get(name) {
        None | Some(Value::Null) if required => Err(ApiError::field(name, format!("{name} is required"))),
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) if s.trim().is_empty() => Err(ApiError::field(name, format!("{name} must be nonempty"))),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(ApiError::field(name, format!("{name} must be a string"))),
    }
}

/// Validates a request body. `allow_previous` admits the optional `previous_response`.
pub fn parse_request(body: &[u8], allow_previous: bool) -> Result<PairRequest, ApiError> {
    let value: Value = serde_json::from_slice(body).map_err(|e| ApiError::BadRequest {
        field: None,
        message: format!("body is not valid JSON: {e}"),
    })?;
    let Value::Object(obj) = value else {
        return Err(ApiError::BadRequest {
            field: None,
            message: "body must be a JSON object".into(),
        });
    };
    let allowed: &[&str] = if allow_previous {
        &["seeker", "response", "previous_response"]
    } else {
        &["seeker", "response"]
    };
    if let Some(k) = obj.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(ApiError::BadRequest {
            field: None,
            message: format!("unknown field {k:?}"),
        });
    }
    Ok(PairRequest {
        seeker: text_field(&obj, "seeker", true)?.unwrap_or_default(),
        response: text_field(&obj, "response", true)?.unwrap_or_default(),
        previous_response: if allow_previous {
            text_field(&obj, "previous_response", false)?
        } else {
            None
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpanOut {
    pub start: usize,
    pub end: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MechanismOut {
    pub mechanism: Mechanism,
    pub level: Level,
    pub probs: [f64; 3],
    pub spans: Vec<SpanOut>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictResponse {
    pub mechanisms: Vec<MechanismOut>,
    pub total_score: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeedbackResponse {
    #[serde(flatten)]
    pub report: FeedbackReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub previous_total_score: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score_delta: Option<i32>,
}

/// Per-mechanism output with span texts cut from `response`.
pub fn mechanism_outputs(response: &str, preds: &[Prediction]) -> Result<Vec<MechanismOut>, String> {
    preds
        .iter()
        .map(|p| {
            let spans = p
                .rationale_spans
                .iter()
                .map(|&s| {
                    let text = s.slice(response).ok_or_else(|| format!("span {s} does not index the response"))?;
                    Ok(SpanOut {
                        start: s.start,
                        end: s.end,
                        text: text.to_owned(),
                    })
                })
                .collect::<Result<_, String>>()?;
            Ok(MechanismOut {
                mechanism: p.mechanism,
                level: p.level,
                probs: p.level_probs,
                spans,
            })
        })
        .collect()
}

pub fn predict_response(response: &str, preds: &[Prediction]) -> Result<PredictResponse, ApiError> {
    if preds.iter().map(|p| p.mechanism).ne(Mechanism::ALL) {
        return Err(ApiError::Internal("predictor returned mechanisms out of order".into()));
    }
    let levels = [0, 1, 2].map(|i| preds[i].level);
    Ok(PredictResponse {
        mechanisms: mechanism_outputs(response, preds).map_err(ApiError::Internal)?,
        total_score: total_of(&levels),
    })
}

async fn infer(state: &AppState, seeker: String, response: String) -> Result<Vec<Prediction>, ApiError> {
    let predictor = Arc::clone(&state.predictor);
    let task = tokio::task::spawn_blocking(move || predictor.predict(&seeker, &response));
    match tokio::time::timeout(state.timeout, task).await {
        Err(_) => Err(ApiError::Timeout),
        Ok(Err(join)) => Err(ApiError::Internal(format!("inference task failed: {join}"))),
        Ok(Ok(Err(e))) => Err(ApiError::Internal(e.to_string())),
        Ok(Ok(Ok(p))) => Ok(p),
    }
}

async fn health(State(state): State<AppState>) -> Json<Value> {
    Json(json!({ "status": "ok", "models": state.predictor.model_hashes() }))
}

async fn predict(State(state): State<AppState>, body: Result<Bytes, BytesRejection>) -> Result<Json<PredictResponse>, ApiError> {
    let req = parse_request(&body?, false)?;
    let preds = infer(&state, req.seeker, req.response.clone()).await?;
    Ok(Json(predict_response(&req.response, &preds)?))
}

async fn feedback(State(state): State<AppState>, body: Result<Bytes, BytesRejection>) -> Result<Json<FeedbackResponse>, ApiError> {
    let req = parse_request(&body?, true)?;
    let preds = infer(&state, req.seeker.clone(), req.response.clone()).await?;
    let report = generate_feedback(&req.response, &preds, &state.templates).map_err(|e| ApiError::Internal(e.to_string()))?;
    let previous_total_score = match req.previous_response {
        None => None,
        Some(prev) => {
            let preds = infer(&state, req.seeker, prev).await?;
            let levels: Vec<Level> = preds.iter().map(|p| p.level).collect();
            let levels: [Level; 3] = levels
                .try_into()
                .map_err(|_| ApiError::Internal("predictor returned the wrong number of mechanisms".into()))?;
            Some(total_of(&levels))
        }
    };
    Ok(Json(FeedbackResponse {
        score_delta: previous_total_score.map(|p| report.total_score as i32 - p as i32),
        previous_total_score,
        report,
    }))
}
