use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use tower::ServiceExt;

use qm_cli::router;
use qm_core::config::EngineConfig;
use qm_core::engine::Engine;
use qm_core::model_gateway::{BackendError, CompletionBackend, Gateway, ModelRole};

const DIM: usize = 64;

fn corpus(file: &str) -> String {
    let p = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures/corpus")
        .join(file);
    std::fs::read_to_string(p).unwrap()
}

fn engine(store: &Path, gateway: Gateway) -> Arc<Engine> {
    let config = EngineConfig {
        dim: DIM,
        store_dir: store.to_path_buf(),
        ..EngineConfig::default()
    };
    Arc::new(Engine::with_gateway(config, gateway).unwrap())
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = axum::body::to_bytes(res.into_body(), usize::MAX)
        .await
        .unwrap();
    let v = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, v)
}

async fn ingest(app: &Router, file: &str, uri: &str, date: &str) -> Value {
    let (status, report) = call(
        app,
        "POST",
        "/ingest",
        Some(json!({"content": corpus(file), "uri": uri, "effective_date": date})),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{report}");
    report
}

#[tokio::test]
async fn ingest_query_and_resolve_everything() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(engine(dir.path(), Gateway::offline(DIM)));

    let (status, health) = call(&app, "GET", "/healthz", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(health["units"], 0);

    let report = ingest(&app, "momentum.md", "corpus://momentum", "2019-06-01").await;
    assert_eq!(report["version"], 1);
    assert_eq!(report["status"], "created");
    assert!(report["unit_count"].as_u64().unwrap() > 0);
    ingest(
        &app,
        "option_hedging.md",
        "corpus://option-hedging",
        "2020-02-01",
    )
    .await;

    let again = ingest(&app, "momentum.md", "corpus://momentum", "2019-06-01").await;
    assert_eq!(again["status"], "unchanged");
    assert_eq!(again["unit_count"], 0);

    let (status, res) = call(
        &app,
        "POST",
        "/query",
        Some(json!({"question": "What is the momentum premium?", "strategy": "single", "k": 4})),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{res}");
    let citations = res["answer"]["citations"].as_array().unwrap();
    assert!(!citations.is_empty());
    for c in citations {
        let id = c["unit_id"].as_str().unwrap();
        let (status, unit) = call(&app, "GET", &format!("/units/{id}"), None).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(unit["unit_id"], id);
    }
    let qid = res["trace"]["query_id"].as_str().unwrap();
    assert_eq!(res["answer"]["trace_ref"], qid);
    let (status, trace) = call(&app, "GET", &format!("/traces/{qid}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(trace, res["trace"]);
}

#[tokio::test]
async fn as_of_before_corpus_is_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(engine(dir.path(), Gateway::offline(DIM)));
    ingest(&app, "momentum.md", "corpus://momentum", "2019-06-01").await;
    let (status, res) = call(
        &app,
        "POST",
        "/query",
        Some(json!({"question": "momentum", "as_of": "2000-01-01"})),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(res["answer"]["flags"], json!(["missing_citations"]));
    assert_eq!(res["trace"]["final_context"], json!([]));
}

#[tokio::test]
async fn errors_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(engine(dir.path(), Gateway::offline(DIM)));

    let (status, body) = call(&app, "POST", "/query", Some(json!({"question": "   "}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(body["error"].as_str().unwrap().contains("empty"));

    let (status, _) = call(&app, "GET", "/units/u0000", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, "GET", "/traces/not-a-trace", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (status, _) = call(
        &app,
        "POST",
        "/query",
        Some(json!({"question": "x", "bogus": 1})),
    )
    .await;
    assert!(status.is_client_error());
}

struct Down;

impl CompletionBackend for Down {
    fn complete(&self, _: &str) -> Result<String, BackendError> {
        Err(BackendError::Permanent("model unavailable".into()))
    }
}

#[tokio::test]
async fn upstream_failure_is_bad_gateway_with_stage() {
    let dir = tempfile::tempdir().unwrap();
    let healthy = engine(dir.path(), Gateway::offline(DIM));
    ingest(
        &router(healthy),
        "momentum.md",
        "corpus://momentum",
        "2019-06-01",
    )
    .await;

    let broken = Gateway::offline(DIM).with_backend(ModelRole::Generation, Arc::new(Down), 1.0);
    let app = router(engine(dir.path(), broken));
    let (status, body) = call(
        &app,
        "POST",
        "/query",
        Some(json!({"question": "momentum premium"})),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_GATEWAY);
    assert_eq!(body["stage"], "enhance");

    let (status, body) = call(
        &app,
        "POST",
        "/ingest",
        Some(json!({"content": "# T\n\nText.", "uri": "mem://t", "effective_date": "2020-01-01"})),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{body}");
}

#[tokio::test]
async fn table1_endpoint() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(engine(dir.path(), Gateway::offline(DIM)));
    let (status, t) = call(&app, "GET", "/eval/table1", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(t["ux"]["by_level"]["2"]["stats"]["mean"], 3.75);
    assert_eq!(t["quality"]["by_condition"].as_object().unwrap().len(), 3);
}
