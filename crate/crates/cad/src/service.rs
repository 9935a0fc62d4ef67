//! HTTP API: inference and the reader-study flow.

use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Multipart, Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use fracvit::data::{crop_resize, decode_image, BoundingBox, FractureLabel, GrayImage};
use fracvit::tensor::{Mode, Tensor};
use fracvit::vit::{attention_rollout, Heatmap, ViTModel};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::CorsLayer;

use crate::study::{CaseRef, Phase, Response as Answer, Role, StudyError, StudyStore};

/// Model output shown to a reader.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub labels: Vec<String>,
    /// Softmax probabilities in `labels` order.
    pub probabilities: Vec<f32>,
    pub label: String,
    /// Attention-rollout relevance of each patch, row-major.
    pub heatmap: Heatmap,
}

pub fn predict_tensor(model: &ViTModel, input: &Tensor) -> fracvit::Result<Prediction> {
    let (logits, trace) = model.forward(input, Mode::Infer)?;
    let max = logits.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let exp: Vec<f64> = logits.data().iter().map(|&v| ((v - max) as f64).exp()).collect();
    let total: f64 = exp.iter().sum();
    let probabilities: Vec<f32> = exp.iter().map(|e| (e / total) as f32).collect();
    let best = fracvit::tensor::kernels::argmax(&probabilities);
    let rollout = attention_rollout(&trace)?;
    let labels: Vec<String> = if model.config().num_classes == FractureLabel::COUNT {
        FractureLabel::names()
    } else {
        (0..model.config().num_classes).map(|c| c.to_string()).collect()
    };
    Ok(Prediction { label: labels[best].clone(), labels, probabilities, heatmap: rollout.heatmap })
}

/// Whole-image resize to the model's input side.
pub fn model_input(img: &GrayImage, side: usize) -> fracvit::Result<Tensor> {
    let bbox = BoundingBox { x: 0, y: 0, w: img.width as u32, h: img.height as u32 };
    crop_resize(img, &bbox, side)
}

/// A study case available to sessions.
pub struct Case {
    pub id: String,
    pub label: FractureLabel,
    /// Model input tensor.
    pub input: Tensor,
    /// PNG shown to the reader.
    pub png: Vec<u8>,
}

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    /// Minimum delay between a case's phase-1 answer and its phase-2 serving.
    pub washout_ms: u64,
    pub default_cases: usize,
    pub seed: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { washout_ms: 0, default_cases: 150, seed: 0 }
    }
}

pub struct AppState {
    pub model: Option<Arc<ViTModel>>,
    pub cases: Vec<Case>,
    pub store: StudyStore,
    pub config: ServiceConfig,
}

impl AppState {
    fn case(&self, id: &str) -> Option<&Case> {
        self.cases.iter().find(|c| c.id == id)
    }
}

#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl ApiError {
    fn bad_request(msg: impl Into<String>) -> Self {
        Self(StatusCode::BAD_REQUEST, msg.into())
    }
}

impl From<StudyError> for ApiError {
    fn from(e: StudyError) -> Self {
        let status = match e {
            StudyError::NotFound(_) => StatusCode::NOT_FOUND,
            StudyError::Conflict(_) => StatusCode::CONFLICT,
            StudyError::BadRequest(_) => StatusCode::BAD_REQUEST,
            StudyError::Store(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/predict", post(predict))
        .route("/study", post(create_study))
        .route("/study/{id}/next", get(next_case))
        .route("/study/{id}/answer", post(answer))
        .route("/study/{id}/report", get(report))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

async fn predict(State(state): State<Arc<AppState>>, mut multipart: Multipart) -> Result<Json<Prediction>, ApiError> {
    let model = state.model.clone().ok_or_else(|| ApiError(StatusCode::SERVICE_UNAVAILABLE, "no model loaded".into()))?;
    let mut bytes = None;
    while let Some(field) = multipart.next_field().await.map_err(|e| ApiError::bad_request(e.to_string()))? {
        let is_image = field.name().is_none_or(|n| n == "image");
        let data = field.bytes().await.map_err(|e| ApiError::bad_request(e.to_string()))?;
        if is_image || bytes.is_none() {
            bytes = Some(data);
        }
    }
    let bytes = bytes.ok_or_else(|| ApiError::bad_request("multipart body has no image field"))?;
    let img = decode_image(&bytes).map_err(|e| ApiError::bad_request(format!("malformed image: {e}")))?;
    let prediction = tokio::task::spawn_blocking(move || {
        let input = model_input(&img, model.config().image_size)?;
        predict_tensor(&model, &input)
    })
    .await
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(Json(prediction))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateStudy {
    pub role: Role,
    pub cases: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StudyCreated {
    pub id: String,
    pub role: Role,
    pub cases: usize,
}

async fn create_study(
    State(state): State<Arc<AppState>>,
    Json(req): Json<CreateStudy>,
) -> Result<(StatusCode, Json<StudyCreated>), ApiError> {
    let n = req.cases.unwrap_or(state.config.default_cases);
    if n == 0 || n > state.cases.len() {
        return Err(ApiError::bad_request(format!("requested {n} cases, {} available", state.cases.len())));
    }
    let mut order: Vec<usize> = (0..state.cases.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(req.seed.unwrap_or(state.config.seed)));
    let cases: Vec<CaseRef> =
        order[..n].iter().map(|&i| CaseRef { id: state.cases[i].id.clone(), label: state.cases[i].label }).collect();
    let id = uuid::Uuid::new_v4().to_string();
    state.store.create(id.clone(), req.role, cases, now_ms())?;
    Ok((StatusCode::CREATED, Json(StudyCreated { id, role: req.role, cases: n })))
}

#[derive(Debug, Deserialize)]
pub struct NextQuery {
    pub phase: u8,
}

/// Case served to a reader. `model` is present only in phase 2.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CasePayload {
    pub session: String,
    pub case_id: String,
    pub phase: u8,
    pub position: usize,
    pub total: usize,
    /// Base64-encoded PNG.
    pub image_png: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<Prediction>,
}

/// Field names of a phase-1 payload.
pub const PHASE1_FIELDS: [&str; 6] = ["session", "case_id", "phase", "position", "total", "image_png"];

async fn next_case(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<NextQuery>,
) -> Result<Response, ApiError> {
    let phase = Phase::try_from(q.phase).map_err(ApiError::bad_request)?;
    let next = state.store.with_session(&id, |s| {
        s.next(phase, now_ms(), state.config.washout_ms).map(|n| n.map(|(i, c)| (i, c.id.clone(), s.cases.len())))
    })??;
    let Some((position, case_id, total)) = next else {
        return Ok(StatusCode::NO_CONTENT.into_response());
    };
    let case = state
        .case(&case_id)
        .ok_or_else(|| ApiError(StatusCode::INTERNAL_SERVER_ERROR, format!("case {case_id} is missing from the case pool")))?;
    let model = match phase {
        Phase::Unassisted => None,
        Phase::Assisted => {
            let m = state.model.as_ref().ok_or_else(|| ApiError(StatusCode::SERVICE_UNAVAILABLE, "no model loaded".into()))?;
            Some(predict_tensor(m, &case.input).map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?)
        }
    };
    let payload = CasePayload {
        session: id,
        case_id,
        phase: phase.number(),
        position,
        total,
        image_png: STANDARD.encode(&case.png),
        model,
    };
    Ok(Json(payload).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerRequest {
    pub case_id: String,
    pub phase: u8,
    pub label: String,
}

async fn answer(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<AnswerRequest>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let phase = Phase::try_from(req.phase).map_err(ApiError::bad_request)?;
    let label: FractureLabel = req.label.parse().map_err(|e: fracvit::Error| ApiError::bad_request(e.to_string()))?;
    let response = Answer { case_id: req.case_id.clone(), phase, label, at_ms: now_ms() };
    let remaining = state.store.answer(&id, response, state.config.washout_ms)?;
    Ok(Json(json!({ "recorded": true, "case_id": req.case_id, "phase": phase.number(), "remaining": remaining })))
}

async fn report(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<crate::study::StudyReport>, ApiError> {
    Ok(Json(state.store.report(&id, state.config.seed)?))
}
