mod common;

use axum::http::StatusCode;
use common::*;
use fracvit::data::FractureLabel;
use fracvit::vit::{ViTConfig, ViTModel};
use fracvit_cad::service::{router, PHASE1_FIELDS};
use fracvit_cad::study::StudyStore;
use serde_json::Value;

fn probabilities(v: &Value) -> Vec<f64> {
    v["probabilities"].as_array().unwrap().iter().map(|p| p.as_f64().unwrap()).collect()
}

#[tokio::test]
async fn predict_returns_a_distribution_and_the_patch_grid() {
    let (app, _) = app(Some(tiny_model()));
    let png = case_pool()[3].png.clone();
    let (status, first) = send(&app, multipart(&png)).await;
    assert_eq!(status, StatusCode::OK);
    let v: Value = serde_json::from_slice(&first).unwrap();
    let p = probabilities(&v);
    assert_eq!(p.len(), 7);
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    assert_eq!(v["heatmap"]["grid"], 8);
    assert_eq!(v["heatmap"]["values"].as_array().unwrap().len(), 64);
    assert!(FractureLabel::names().contains(&v["label"].as_str().unwrap().to_string()));

    let (_, second) = send(&app, multipart(&png)).await;
    assert_eq!(first, second);
}

#[tokio::test]
async fn large_geometry_predicts_on_a_fourteen_grid() {
    let cfg = ViTConfig { image_size: 224, patch_size: 16, hidden_size: 8, num_heads: 2, num_layers: 1, mlp_units: 8, head_units: 8, ..ViTConfig::paper_large_16() };
    let (app, _) = app(Some(ViTModel::new(cfg, 0).unwrap()));
    let (status, v) = json(&app, multipart(&case_pool()[0].png)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["heatmap"]["grid"], 14);
    assert_eq!(v["heatmap"]["values"].as_array().unwrap().len(), 196);
}

#[tokio::test]
async fn truncated_upload_is_a_bad_request() {
    let (app, _) = app(Some(tiny_model()));
    let png = case_pool()[0].png.clone();
    let (status, v) = json(&app, multipart(&png[..png.len() / 2])).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(v["error"].as_str().is_some());
}

#[tokio::test]
async fn predict_without_a_model_is_unavailable() {
    let (app, _) = app(None);
    let (status, _) = send(&app, multipart(&case_pool()[0].png)).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn residents_fixture_reproduces_the_reported_accuracies() {
    let (app, truth) = app(Some(tiny_model()));
    let s = scripted_session(&app, &truth, "resident", 150, 87, 144).await;
    let r = &s.report;
    assert_eq!(r["cases"], 150);
    assert_eq!(r["phase1"]["correct"], 87);
    assert_eq!(r["phase2"]["correct"], 144);
    assert!((r["phase1"]["accuracy"].as_f64().unwrap() - 0.58).abs() < 1e-12);
    assert!((r["phase2"]["accuracy"].as_f64().unwrap() - 0.96).abs() < 1e-12);
    assert!((r["improvement"].as_f64().unwrap() - 0.38).abs() < 1e-12);
    assert_eq!(
        r["improvement"].as_f64().unwrap(),
        r["phase2"]["accuracy"].as_f64().unwrap() - r["phase1"]["accuracy"].as_f64().unwrap()
    );
    let agg = &r["roles"]["resident"];
    assert_eq!(agg["sessions"], 1);
    let ci = agg["accuracy_phase1"]["ci"].as_array().unwrap();
    assert!(ci[0].as_f64().unwrap() <= 0.58 && 0.58 <= ci[1].as_f64().unwrap());
}

#[tokio::test]
async fn phase_one_payloads_carry_no_model_output() {
    let (app, truth) = app(Some(tiny_model()));
    let s = scripted_session(&app, &truth, "radiologist", 12, 12, 12).await;
    let mut expected: Vec<String> = PHASE1_FIELDS.iter().map(|f| f.to_string()).collect();
    expected.sort();
    assert!(s.phase1_keys.iter().all(|k| *k == expected));
    for p in &s.phase2_payloads {
        let model = &p["model"];
        assert_eq!(probabilities(model).len(), 7);
        assert_eq!(model["heatmap"]["grid"], 8);
    }
    assert_eq!(s.report["phase1"]["accuracy"], 1.0);
    assert_eq!(s.report["phase2"]["accuracy"], 1.0);
    assert_eq!(s.report["improvement"], 0.0);
}

#[tokio::test]
async fn protocol_violations_are_rejected() {
    let (app, truth) = app(Some(tiny_model()));
    let id = create(&app, "other", 3).await;
    let (_, payload) = next(&app, &id, 1).await;
    let case = payload["case_id"].as_str().unwrap().to_string();
    let label = truth[&case].name();

    assert_eq!(answer(&app, &id, &case, 2, label).await.0, StatusCode::CONFLICT);
    assert_eq!(next(&app, &id, 2).await.0, StatusCode::CONFLICT);
    assert_eq!(answer(&app, &id, &case, 1, label).await.0, StatusCode::OK);
    assert_eq!(answer(&app, &id, &case, 1, label).await.0, StatusCode::CONFLICT);
    assert_eq!(answer(&app, &id, "no-such-case", 1, label).await.0, StatusCode::NOT_FOUND);
    assert_eq!(answer(&app, "no-such-session", &case, 1, label).await.0, StatusCode::NOT_FOUND);
    assert_eq!(answer(&app, &id, &case, 3, label).await.0, StatusCode::BAD_REQUEST);
    let other = FractureLabel::ALL.iter().find(|l| l.name() != label).unwrap();
    assert_eq!(answer(&app, &id, &case, 2, "C9").await.0, StatusCode::BAD_REQUEST);
    assert_eq!(answer(&app, &id, &case, 2, other.name()).await.0, StatusCode::OK);
    assert_eq!(next(&app, &id, 3).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(json(&app, get("/study/nope/report")).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn oversized_sessions_and_unknown_roles_are_refused() {
    let (app, _) = app(Some(tiny_model()));
    let (status, _) = json(&app, post_json("/study", serde_json::json!({ "role": "resident", "cases": 1000 }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = send(&app, post_json("/study", serde_json::json!({ "role": "student" }))).await;
    assert!(status.is_client_error());
}

#[tokio::test]
async fn washout_delays_phase_two() {
    let (state, truth) = state(Some(tiny_model()), StudyStore::in_memory(), 3_600_000);
    let app = router(state);
    let id = create(&app, "resident", 2).await;
    let (_, p) = next(&app, &id, 1).await;
    let case = p["case_id"].as_str().unwrap().to_string();
    assert_eq!(answer(&app, &id, &case, 1, truth[&case].name()).await.0, StatusCode::OK);
    assert_eq!(next(&app, &id, 2).await.0, StatusCode::CONFLICT);
    assert_eq!(answer(&app, &id, &case, 2, truth[&case].name()).await.0, StatusCode::CONFLICT);
}

#[tokio::test]
async fn restart_replays_the_session_log() {
    let dir = tempfile::tempdir().unwrap();
    let (state1, truth) = state(Some(tiny_model()), StudyStore::open(dir.path()).unwrap(), 0);
    let app1 = router(state1);
    let id = create(&app1, "resident", 5).await;
    for _ in 0..3 {
        let (_, p) = next(&app1, &id, 1).await;
        let case = p["case_id"].as_str().unwrap().to_string();
        answer(&app1, &id, &case, 1, wrong(truth[&case]).name()).await;
    }
    let (_, p) = next(&app1, &id, 2).await;
    let case = p["case_id"].as_str().unwrap().to_string();
    answer(&app1, &id, &case, 2, truth[&case].name()).await;
    let (_, before) = json(&app1, get(&format!("/study/{id}/report"))).await;
    let (_, next_before) = next(&app1, &id, 1).await;
    drop(app1);

    let (state2, _) = state(Some(tiny_model()), StudyStore::open(dir.path()).unwrap(), 0);
    let app2 = router(state2);
    let (_, after) = json(&app2, get(&format!("/study/{id}/report"))).await;
    assert_eq!(before, after);
    assert_eq!(next(&app2, &id, 1).await.1, next_before);
    assert_eq!(answer(&app2, &id, &case, 2, truth[&case].name()).await.0, StatusCode::CONFLICT);
}

#[tokio::test]
async fn concurrent_sessions_do_not_interfere() {
    let (app, truth) = app(Some(tiny_model()));
    let a = tokio::spawn({
        let (app, truth) = (app.clone(), truth.clone());
        async move { scripted_session(&app, &truth, "resident", 10, 10, 5).await.report }
    });
    let b = tokio::spawn({
        let (app, truth) = (app.clone(), truth.clone());
        async move { scripted_session(&app, &truth, "resident", 10, 4, 10).await.report }
    });
    let (ra, rb) = (a.await.unwrap(), b.await.unwrap());
    assert_eq!(ra["phase1"]["accuracy"], 1.0);
    assert_eq!(ra["phase2"]["accuracy"], 0.5);
    assert_eq!(rb["phase1"]["accuracy"], 0.4);
    assert_eq!(rb["phase2"]["accuracy"], 1.0);
    let (_, rep) = json(&app, get(&format!("/study/{}/report", ra["session"].as_str().unwrap()))).await;
    assert_eq!(rep["roles"]["resident"]["sessions"], 2);
    let pooled = rep["roles"]["resident"]["accuracy_phase1"]["value"].as_f64().unwrap();
    assert!((pooled - 0.7).abs() < 1e-12);
}
