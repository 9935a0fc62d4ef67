#![allow(dead_code)]

use std::collections::HashMap;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use fracvit::data::{synth_generate, FractureLabel};
use fracvit::vit::{ViTConfig, ViTModel};
use fracvit_cad::service::{router, AppState, Case, ServiceConfig};
use fracvit_cad::study::StudyStore;
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

pub const BOUNDARY: &str = "fracvit-test-boundary";

/// 154 synthetic cases (22 per class) prepared for the tiny preset.
pub fn case_pool() -> Vec<Case> {
    let d = synth_generate(22, 5).unwrap();
    let inputs = d.tensors(ViTConfig::tiny().image_size).unwrap();
    d.manifest
        .samples
        .iter()
        .zip(inputs)
        .zip(&d.images)
        .map(|((s, input), img)| Case { id: s.id.clone(), label: s.label, input, png: img.to_png().unwrap() })
        .collect()
}

pub fn truth_of(cases: &[Case]) -> HashMap<String, FractureLabel> {
    cases.iter().map(|c| (c.id.clone(), c.label)).collect()
}

pub fn state(model: Option<ViTModel>, store: StudyStore, washout_ms: u64) -> (Arc<AppState>, HashMap<String, FractureLabel>) {
    let cases = case_pool();
    let truth = truth_of(&cases);
    let config = ServiceConfig { washout_ms, ..ServiceConfig::default() };
    (Arc::new(AppState { model: model.map(Arc::new), cases, store, config }), truth)
}

pub fn app(model: Option<ViTModel>) -> (Router, HashMap<String, FractureLabel>) {
    let (s, truth) = state(model, StudyStore::in_memory(), 0);
    (router(s), truth)
}

pub fn tiny_model() -> ViTModel {
    ViTModel::new(ViTConfig::tiny(), 1).unwrap()
}

pub async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

pub async fn json(app: &Router, req: Request<Body>) -> (StatusCode, Value) {
    let (status, bytes) = send(app, req).await;
    let v = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, v)
}

pub fn multipart(png: &[u8]) -> Request<Body> {
    let mut body = Vec::new();
    body.extend(format!("--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"image\"; filename=\"x.png\"\r\nContent-Type: image/png\r\n\r\n").bytes());
    body.extend_from_slice(png);
    body.extend(format!("\r\n--{BOUNDARY}--\r\n").bytes());
    Request::post("/predict")
        .header("content-type", format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(body))
        .unwrap()
}

pub fn post_json(uri: &str, v: Value) -> Request<Body> {
    Request::post(uri).header("content-type", "application/json").body(Body::from(v.to_string())).unwrap()
}

pub fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

pub async fn create(app: &Router, role: &str, cases: usize) -> String {
    let (status, v) = json(app, post_json("/study", serde_json::json!({ "role": role, "cases": cases }))).await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    v["id"].as_str().unwrap().to_string()
}

pub async fn next(app: &Router, id: &str, phase: u8) -> (StatusCode, Value) {
    json(app, get(&format!("/study/{id}/next?phase={phase}"))).await
}

pub async fn answer(app: &Router, id: &str, case: &str, phase: u8, label: &str) -> (StatusCode, Value) {
    json(app, post_json(&format!("/study/{id}/answer"), serde_json::json!({ "case_id": case, "phase": phase, "label": label }))).await
}

pub fn wrong(label: FractureLabel) -> FractureLabel {
    FractureLabel::ALL[(label.index() + 1) % FractureLabel::COUNT]
}

/// Outcome of a scripted session.
pub struct Scripted {
    pub id: String,
    pub report: Value,
    /// Key sets of every phase-1 payload.
    pub phase1_keys: Vec<Vec<String>>,
    pub phase2_payloads: Vec<Value>,
}

/// Runs a full two-phase session over `cases` cases in which the first
/// `correct1` phase-1 answers and the first `correct2` phase-2 answers are
/// right and the rest wrong.
pub async fn scripted_session(
    app: &Router,
    truth: &HashMap<String, FractureLabel>,
    role: &str,
    cases: usize,
    correct1: usize,
    correct2: usize,
) -> Scripted {
    let id = create(app, role, cases).await;
    let mut phase1_keys = Vec::new();
    let mut phase2_payloads = Vec::new();
    for (phase, correct) in [(1u8, correct1), (2u8, correct2)] {
        for k in 0..cases {
            let (status, payload) = next(app, &id, phase).await;
            assert_eq!(status, StatusCode::OK, "{payload}");
            let case = payload["case_id"].as_str().unwrap().to_string();
            if phase == 1 {
                let mut keys: Vec<String> = payload.as_object().unwrap().keys().cloned().collect();
                keys.sort();
                phase1_keys.push(keys);
            } else {
                phase2_payloads.push(payload);
            }
            let t = truth[&case];
            let label = if k < correct { t } else { wrong(t) };
            let (status, ack) = answer(app, &id, &case, phase, label.name()).await;
            assert_eq!(status, StatusCode::OK, "{ack}");
        }
        let (status, _) = next(app, &id, phase).await;
        assert_eq!(status, StatusCode::NO_CONTENT);
    }
    let (status, report) = json(app, get(&format!("/study/{id}/report"))).await;
    assert_eq!(status, StatusCode::OK);
    Scripted { id, report, phase1_keys, phase2_payloads }
}
