use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use mkedit::server::{router, AppState};
use mkedit_core::gateway::{Embedder, MockGenerator};
use mkedit_core::kb::KnowledgeBase;
use mkedit_core::pipeline::{Backends, PipelineConfig};
use mkedit_core::retrieval::{CosineScorer, ScorerConfig};
use mkedit_core::synthetic::{mirrored_fixture, mock_script, synthetic_dataset};

fn app(dir: &tempfile::TempDir, with_data: bool) -> Router {
    let data = synthetic_dataset(20);
    let embedder: Arc<dyn Embedder> = Arc::new(mirrored_fixture(&data, 64, 5).unwrap());
    let backends = Backends {
        generator: Arc::new(MockGenerator::new(mock_script(&data)).with_alignment(embedder.clone())),
        embedder: embedder.clone(),
        scorer: Arc::new(CosineScorer::new(embedder, 0.75)),
    };
    let config = PipelineConfig {
        shots: 4,
        ..PipelineConfig::default()
    };
    let state = AppState::new(
        KnowledgeBase::new(),
        Some(dir.path().join("kb.jsonl")),
        backends,
        config,
        ScorerConfig::default(),
        with_data.then_some(data),
        1,
    );
    router(Arc::new(state))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn call_json(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, body).await;
    (s, if b.is_empty() { Value::Null } else { serde_json::from_slice(&b).unwrap() })
}

#[tokio::test(flavor = "multi_thread")]
async fn facts_crud_persists() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(&dir, false);
    let fact = json!({"lang": "es", "question": "[ES] What is the home city of entity3?", "answer": "Newtown 3"});
    let (s, v) = call_json(&app, "POST", "/api/facts", Some(fact.clone())).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(v["replaced"], false);
    let id = v["id"].as_u64().unwrap();

    let (s, v) = call_json(&app, "POST", "/api/facts", Some(fact)).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["replaced"], true);

    let (_, v) = call_json(&app, "GET", "/api/facts?lang=es", None).await;
    assert_eq!(v.as_array().unwrap().len(), 1);
    let (_, v) = call_json(&app, "GET", "/api/facts?lang=en", None).await;
    assert!(v.as_array().unwrap().is_empty());
    let (s, _) = call_json(&app, "GET", "/api/facts?lang=xx", None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let saved = KnowledgeBase::load(dir.path().join("kb.jsonl")).unwrap();
    assert_eq!(saved.len(), 1);

    let (s, _) = call(&app, "DELETE", &format!("/api/facts/{id}"), None).await;
    assert_eq!(s, StatusCode::NO_CONTENT);
    let (s, _) = call(&app, "DELETE", &format!("/api/facts/{id}"), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert!(KnowledgeBase::load(dir.path().join("kb.jsonl")).unwrap().is_empty());
}

#[tokio::test(flavor = "multi_thread")]
async fn query_cross_lingual_and_green_path() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(&dir, true);
    let fact = json!({"lang": "es", "question": "[ES] What is the home city of entity3?", "answer": "Newtown 3"});
    call_json(&app, "POST", "/api/facts", Some(fact)).await;

    let q = json!({"text": "Entity3 has which home city?", "test_lang": "en"});
    let (s, v) = call_json(&app, "POST", "/api/query", Some(q)).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["answer"], "Newtown 3");
    assert_eq!(v["pre_edit_answer"], "Oldtown 3");
    assert!(v["retrieved"].is_object());
    assert!(v["prompt"].as_str().unwrap().contains("New Fact: [ES] What is the home city of entity3? Newtown 3"));

    let q = json!({"text": "What is the home city of company3?", "test_lang": "en"});
    let (_, v) = call_json(&app, "POST", "/api/query", Some(q)).await;
    assert!(v["retrieved"].is_null());
    assert_eq!(v["prompt"], "What is the home city of company3?");
    assert_eq!(v["answer"], "Harbor 3");

    let q = json!({"text": "x", "test_lang": "en", "mode": "zero", "shots": 3});
    let (s, _) = call_json(&app, "POST", "/api/query", Some(q)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread")]
async fn eval_job_lifecycle() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(&dir, true);
    let req = json!({"config": {"edit_langs": ["en"], "test_langs": ["en", "es"], "limit": 5}});
    let (s, v) = call_json(&app, "POST", "/api/eval", Some(req)).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let id = v["job_id"].as_u64().unwrap();

    let mut status = Value::Null;
    for _ in 0..600 {
        let (s, v) = call_json(&app, "GET", &format!("/api/eval/{id}"), None).await;
        assert_eq!(s, StatusCode::OK);
        status = v;
        if status["status"] == "done" || status["status"] == "failed" {
            break;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    assert_eq!(status["status"], "done", "{status}");
    assert_eq!(status["done"], 10);
    assert_eq!(status["report"]["cells"].as_array().unwrap().len(), 2);

    let (s, csv) = call(&app, "GET", &format!("/api/reports/{id}.csv"), None).await;
    assert_eq!(s, StatusCode::OK);
    let csv = String::from_utf8(csv).unwrap();
    assert!(csv.starts_with("edit_lang,test_lang,metric,em,f1,n"));
    assert_eq!(csv.lines().count(), 1 + 2 * 4);

    let (s, _) = call(&app, "GET", "/api/reports/99.csv", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "GET", "/api/eval/99", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread")]
async fn eval_rejects_bad_requests() {
    let dir = tempfile::tempdir().unwrap();
    let no_data = app(&dir, false);
    let req = json!({"config": {"edit_langs": ["en"], "test_langs": ["en"]}});
    let (s, _) = call_json(&no_data, "POST", "/api/eval", Some(req)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let app = app(&dir, true);
    for cfg in [
        json!({"edit_langs": [], "test_langs": ["en"]}),
        json!({"edit_langs": ["en"], "test_langs": ["xx"]}),
        json!({"edit_langs": ["en"], "test_langs": ["en"], "mode": "zero", "shots": 2}),
        json!({"edit_langs": ["en"], "test_langs": ["en"], "limit": 0}),
    ] {
        let (s, _) = call_json(&app, "POST", "/api/eval", Some(json!({ "config": cfg }))).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{cfg}");
    }
}
