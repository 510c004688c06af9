use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use docqa::config::{PipelineConfig, QueryOverrides};
use docqa::corpus::ingest_dir;
use docqa::pipeline::{Pipeline, QueryResponse};
use docqa_service::{answer, router, QueryRequest};

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/mini")
}

fn pipeline() -> Arc<Pipeline> {
    let cfg = PipelineConfig::load(&fixture().join("config.json")).unwrap();
    let chunks = ingest_dir(&fixture().join("docs"), 2).unwrap().chunks;
    Arc::new(Pipeline::builder(cfg, chunks).build().unwrap())
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Value) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (
        status,
        serde_json::from_slice(&bytes).unwrap_or(Value::Null),
    )
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn post(uri: &str, body: impl Into<Body>) -> Request<Body> {
    Request::post(uri)
        .header("content-type", "application/json")
        .body(body.into())
        .unwrap()
}

const Q: &str = "How do I use initialize_floorplan in my flow?";

#[tokio::test]
async fn health_reports_index_stats() {
    let app = router(pipeline(), None);
    let (status, body) = call(&app, get("/api/health")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "ok");
    assert_eq!(body["chunks"], 50);
    assert_eq!(body["vectors"], 50);
    assert_eq!(body["embedding_dim"], 256);
}

#[tokio::test]
async fn query_payload_equals_run_query() {
    let p = pipeline();
    let app = router(p.clone(), None);
    let (status, body) = call(&app, post("/api/query", json!({"question": Q}).to_string())).await;
    assert_eq!(status, StatusCode::OK);
    let direct = answer(
        &p,
        &QueryRequest {
            question: Q.into(),
            overrides: QueryOverrides::default(),
        },
    )
    .unwrap();
    let via_http: QueryResponse = serde_json::from_value(body.clone()).unwrap();
    assert_eq!(via_http, direct);
    assert_eq!(body, serde_json::to_value(&direct).unwrap());
    assert_eq!(
        body["candidates"][0]["chunk_id"],
        "ifp.md#initialize_floorplan"
    );
    assert_eq!(body["status"], "answered");
}

#[tokio::test]
async fn overrides_are_per_request() {
    let app = router(pipeline(), None);
    let body = json!({"question": Q, "overrides": {"rerank_k": 2, "rerank_backend": "cosine"}});
    let (_, first) = call(&app, post("/api/query", body.to_string())).await;
    assert_eq!(first["candidates"].as_array().unwrap().len(), 2);
    assert_eq!(first["reranker"], "cosine");
    let (_, second) = call(&app, post("/api/query", json!({"question": Q}).to_string())).await;
    assert_eq!(second["candidates"].as_array().unwrap().len(), 5);
    assert_eq!(second["reranker"], "canned");
}

#[tokio::test]
async fn malformed_bodies_are_400_with_codes() {
    let app = router(pipeline(), None);
    for bad in [
        "not json".to_string(),
        json!({"q": Q}).to_string(),
        json!({"question": Q, "extra": 1}).to_string(),
        json!({"question": Q, "overrides": {"rerank_k": "five"}}).to_string(),
        json!({"question": Q, "overrides": {"paths": {}}}).to_string(),
    ] {
        let (status, body) = call(&app, post("/api/query", bad.clone())).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{bad}");
        assert_eq!(body["code"], "invalid_request", "{bad}");
        assert!(body["message"].as_str().unwrap().len() > 5);
        assert!(body.get("stage").is_some());
    }
    for (bad, code) in [
        (json!({"question": "  "}), "invalid_input"),
        (
            json!({"question": Q, "overrides": {"rerank_k": 0}}),
            "config_error",
        ),
        (
            json!({"question": Q, "overrides": {"rerank_backend": "nope"}}),
            "config_error",
        ),
    ] {
        let (status, body) = call(&app, post("/api/query", bad.to_string())).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{bad}");
        assert_eq!(body["code"], code, "{bad}: {body}");
    }
}

#[tokio::test]
async fn chunks_resolve_by_id_including_hash_and_slash() {
    let p = pipeline();
    let app = router(p.clone(), None);
    let (status, body) = call(&app, get("/api/chunks/ifp.md%23initialize_floorplan")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["id"], "ifp.md#initialize_floorplan");
    assert_eq!(body["heading_path"], json!(["initialize_floorplan"]));
    assert!(body["text"]
        .as_str()
        .unwrap()
        .starts_with("# initialize_floorplan"));

    let (status, body) = call(&app, get("/api/chunks/nope.md%23missing")).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["code"], "chunk_not_found");

    // ids containing a slash also resolve
    let nested = docqa::corpus::segment_markdown(
        &docqa::corpus::Document::new(
            "docs/flow.md",
            "# routing\n\nroute it\n\n## global route\n\nglobal",
        ),
        2,
    );
    let cfg = PipelineConfig {
        embedding: docqa::config::EmbeddingConfig::Hash { dim: 16, seed: 0 },
        ..Default::default()
    };
    let app = router(
        Arc::new(Pipeline::builder(cfg, nested).build().unwrap()),
        None,
    );
    let (status, body) = call(&app, get("/api/chunks/docs/flow.md%23routing/global-route")).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["heading_path"], json!(["routing", "global route"]));
}

#[tokio::test]
async fn config_is_redacted_and_lists_backends() {
    let mut cfg = PipelineConfig::load(&fixture().join("config.json")).unwrap();
    cfg.judge = docqa::config::JudgeConfig::Remote {
        base_url: "https://user:pw@judge.example/v1?key=abc".into(),
        api_key_env: Some("JUDGE_KEY".into()),
        name: "judge".into(),
    };
    let chunks = ingest_dir(&fixture().join("docs"), 2).unwrap().chunks;
    let app = router(
        Arc::new(Pipeline::builder(cfg, chunks).build().unwrap()),
        None,
    );
    let (status, body) = call(&app, get("/api/config")).await;
    assert_eq!(status, StatusCode::OK);
    let text = body.to_string();
    assert!(!text.contains("pw@"), "{text}");
    assert!(!text.contains("key=abc"), "{text}");
    assert!(text.contains("JUDGE_KEY"));
    let backends: Vec<&str> = body["rerank_backends"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    assert!(
        backends.contains(&"rrf") && backends.contains(&"cosine") && backends.contains(&"canned")
    );
    assert_eq!(body["lexical_engines"], json!(["bm25", "tfidf"]));
    assert_eq!(body["config"]["rerank_k"], 5);
}

#[tokio::test]
async fn cors_headers_are_present() {
    let app = router(pipeline(), Some("http://localhost:5173"));
    let req = Request::builder()
        .method("OPTIONS")
        .uri("/api/query")
        .header("origin", "http://localhost:5173")
        .header("access-control-request-method", "POST")
        .header("access-control-request-headers", "content-type")
        .body(Body::empty())
        .unwrap();
    let resp = app.oneshot(req).await.unwrap();
    assert_eq!(
        resp.headers().get("access-control-allow-origin").unwrap(),
        "http://localhost:5173"
    );
}

#[tokio::test]
async fn unknown_routes_use_the_error_shape() {
    let app = router(pipeline(), None);
    let (status, body) = call(&app, get("/api/nope")).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["code"], "not_found");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_queries_do_not_interfere() {
    let p = pipeline();
    let app = router(p.clone(), None);
    let questions: Vec<String> = docqa::bench::load_dataset(&fixture().join("dataset.json"))
        .unwrap()
        .records
        .into_iter()
        .map(|r| r.question)
        .take(16)
        .collect();
    let mut handles = Vec::new();
    for (i, q) in questions.iter().enumerate() {
        let app = app.clone();
        let k = 1 + i % 5;
        let body = json!({"question": q, "overrides": {"rerank_k": k}}).to_string();
        handles.push(tokio::spawn(async move {
            (k, call(&app, post("/api/query", body)).await)
        }));
    }
    for (h, q) in handles.into_iter().zip(&questions) {
        let (k, (status, body)) = h.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        assert_eq!(body["question"], q.as_str());
        assert_eq!(body["candidates"].as_array().unwrap().len(), k);
        let direct = p
            .run_query(
                q,
                &QueryOverrides {
                    rerank_k: Some(k),
                    ..Default::default()
                },
            )
            .unwrap();
        assert_eq!(body, serde_json::to_value(&direct).unwrap());
    }
}

#[tokio::test]
async fn serve_reports_bind_failure() {
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = taken.local_addr().unwrap().to_string();
    let err = docqa_service::serve(pipeline(), &addr, None)
        .await
        .unwrap_err();
    assert!(err.to_string().contains("cannot bind"), "{err}");
}
