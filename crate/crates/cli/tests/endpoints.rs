mod common;

use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use dosegraph::bundle::load_dir;
use dosegraph::encoders::{encode_prompt_hashed, PromptEncoder};
use dosegraph::evaluation::CDVH_EDGES;
use dosegraph_cli::pipeline::{load_model, predict_cmd};
use dosegraph_cli::service::{router, AppState};

fn state(data: &Path, ckpt: &Path, endpoint: Option<String>, journal: Option<&Path>) -> Arc<AppState> {
    let model = load_model(ckpt).unwrap();
    let width = model.config().prompt_width;
    let encoder = PromptEncoder {
        endpoint,
        timeout_ms: 1000,
        width,
    };
    AppState::new(model, &load_dir(data).unwrap(), 0.3, encoder, journal.map(Path::to_path_buf)).unwrap()
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<&str>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn create(app: &Router, case_id: &str) -> Value {
    let (status, body) = call(app, "POST", "/sessions", Some(&json!({ "case_id": case_id }).to_string())).await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    body
}

async fn instruct(app: &Router, id: &str, text: &str) -> Value {
    let uri = format!("/sessions/{id}/instruct");
    let (status, body) = call(app, "POST", &uri, Some(&json!({ "text": text }).to_string())).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    body
}

fn doses(v: &Value) -> Vec<f64> {
    serde_json::from_value(v["predictions"].clone()).unwrap()
}

#[tokio::test]
async fn lists_cases() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = common::fixture(dir.path());
    let app = router(state(&data, &ckpt, None, None));
    let (status, body) = call(&app, "GET", "/cases", None).await;
    assert_eq!(status, StatusCode::OK);
    let ids: Vec<&str> = body["cases"].as_array().unwrap().iter().map(|c| c["case_id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["phantom-000", "phantom-001", "phantom-002", "phantom-003"]);
    assert!(body["cases"][1]["prescription_text"].as_str().unwrap().contains("BOOST_PTV"));
}

#[tokio::test]
async fn session_starts_with_empty_prompt_and_full_curves() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = common::fixture(dir.path());
    let app = router(state(&data, &ckpt, None, None));
    let s = create(&app, "phantom-000").await;
    assert_eq!(s["prompt_text"], "");
    assert_eq!(s["warnings"], json!([]));
    let id = s["session_id"].as_str().unwrap();

    let (status, cdvh) = call(&app, "GET", &format!("/sessions/{id}/cdvh"), None).await;
    assert_eq!(status, StatusCode::OK);
    let structures = cdvh["structures"].as_array().unwrap();
    assert!(!structures.is_empty());
    for st in structures {
        assert_eq!(st["edges_gy"].as_array().unwrap().len(), CDVH_EDGES);
        assert_eq!(st["predicted"].as_array().unwrap().len(), CDVH_EDGES);
        assert_eq!(st["true"].as_array().unwrap().len(), CDVH_EDGES);
        assert_eq!(st["predicted"][0], 1.0);
    }
    assert_eq!(cdvh["structures"], s["structures"]);
}

#[tokio::test]
async fn empty_instruction_keeps_initial_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = common::fixture(dir.path());
    let app = router(state(&data, &ckpt, None, None));
    let s = create(&app, "phantom-002").await;
    let id = s["session_id"].as_str().unwrap();
    let after = instruct(&app, id, "").await;
    assert_eq!(doses(&after), doses(&s));
    assert_eq!(after["structures"], s["structures"]);

    let boosted = instruct(&app, id, "BOOST_PTV").await;
    assert_ne!(doses(&boosted), doses(&s));

    let (_, hist) = call(&app, "GET", &format!("/sessions/{id}/history"), None).await;
    let entries = hist["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 2);
    assert_eq!(entries[0]["instruction"], "");
    assert_eq!(entries[1]["instruction"], "BOOST_PTV");
    assert_eq!(entries[1]["seq"], 2);
    assert_eq!(entries[1]["mse"], boosted["mse"]);
}

#[tokio::test]
async fn sessions_are_isolated() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = common::fixture(dir.path());
    let app = router(state(&data, &ckpt, None, None));
    let a = create(&app, "phantom-001").await;
    let b = create(&app, "phantom-001").await;
    assert_ne!(a["session_id"], b["session_id"]);
    instruct(&app, a["session_id"].as_str().unwrap(), "BOOST_PTV dose").await;
    let (_, b_curves) = call(&app, "GET", &format!("/sessions/{}/cdvh", b["session_id"].as_str().unwrap()), None).await;
    assert_eq!(b_curves["structures"], b["structures"]);
    assert_eq!(b_curves["prompt_text"], "");
    let (_, b_hist) = call(&app, "GET", &format!("/sessions/{}/history", b["session_id"].as_str().unwrap()), None).await;
    assert_eq!(b_hist["entries"], json!([]));
}

#[tokio::test]
async fn predictions_match_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = common::fixture(dir.path());
    let app = router(state(&data, &ckpt, None, None));
    let s = create(&app, "phantom-003").await;
    let case = data.join("phantom-003.dgb");
    let offline = predict_cmd(&case, &ckpt, "", 0.3, None).unwrap();
    assert_eq!(doses(&s), offline.doses);
    let online = instruct(&app, s["session_id"].as_str().unwrap(), "BOOST_PTV").await;
    let offline = predict_cmd(&case, &ckpt, "BOOST_PTV", 0.3, None).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&doses(&online)), bits(&offline.doses));
}

#[tokio::test]
async fn errors_are_structured() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = common::fixture(dir.path());
    let app = router(state(&data, &ckpt, None, None));

    let (status, body) = call(&app, "POST", "/sessions", Some(r#"{"case_id":"nope"}"#)).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"]["code"], "not_found");

    for uri in ["/sessions/s99/cdvh", "/sessions/s99/history"] {
        let (status, body) = call(&app, "GET", uri, None).await;
        assert_eq!(status, StatusCode::NOT_FOUND);
        assert!(body["error"]["message"].as_str().unwrap().contains("s99"));
    }
    let (status, _) = call(&app, "POST", "/sessions/s99/instruct", Some(r#"{"text":""}"#)).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (status, body) = call(&app, "POST", "/sessions", Some("{not json")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"]["code"], "bad_request");
    let (status, _) = call(&app, "POST", "/sessions", Some(r#"{"case":"phantom-000"}"#)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let s = create(&app, "phantom-000").await;
    let uri = format!("/sessions/{}/instruct", s["session_id"].as_str().unwrap());
    let (status, _) = call(&app, "POST", &uri, Some(r#"{"text": 5}"#)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

async fn mock_embedding_server(scale: f64) -> String {
    let app = Router::new().route(
        "/embed",
        post(move |Json(req): Json<Value>| async move {
            let width = req["width"].as_u64().unwrap() as usize;
            let text = req["text"].as_str().unwrap().to_string();
            let values: Vec<f64> = encode_prompt_hashed(&text, width).values.iter().map(|v| v * scale).collect();
            Json(json!({ "embedding": values }))
        }),
    );
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    format!("http://{addr}/embed")
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn remote_embeddings_and_fallback() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = common::fixture(dir.path());

    let url = mock_embedding_server(-2.0).await;
    let remote = router(state(&data, &ckpt, Some(url.clone()), None));
    let local = router(state(&data, &ckpt, None, None));
    let r = create(&remote, "phantom-000").await;
    let l = create(&local, "phantom-000").await;
    let r = instruct(&remote, r["session_id"].as_str().unwrap(), "BOOST_PTV").await;
    let l = instruct(&local, l["session_id"].as_str().unwrap(), "BOOST_PTV").await;
    assert_eq!(r["warnings"], json!([]));
    assert_ne!(doses(&r), doses(&l), "remote embedding should differ from the hashed one");
    let offline = predict_cmd(&data.join("phantom-000.dgb"), &ckpt, "BOOST_PTV", 0.3, Some(url)).unwrap();
    assert_eq!(doses(&r), offline.doses);

    // Nothing listens on port 9 here, so the client falls back.
    let dead = router(state(&data, &ckpt, Some("http://127.0.0.1:9/embed".into()), None));
    let d = create(&dead, "phantom-000").await;
    let d = instruct(&dead, d["session_id"].as_str().unwrap(), "BOOST_PTV").await;
    let warnings = d["warnings"].as_array().unwrap();
    assert_eq!(warnings.len(), 1);
    assert!(warnings[0].as_str().unwrap().contains("hashed"));
    assert_eq!(doses(&d), doses(&l));
}

#[tokio::test]
async fn journal_replay_restores_sessions() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = common::fixture(dir.path());
    let journal = dir.path().join("sessions.jsonl");
    let app = router(state(&data, &ckpt, None, Some(&journal)));
    let a = create(&app, "phantom-001").await;
    let id = a["session_id"].as_str().unwrap().to_string();
    instruct(&app, &id, "BOOST_PTV").await;
    let last = instruct(&app, &id, "keep cord low").await;
    let (_, hist) = call(&app, "GET", &format!("/sessions/{id}/history"), None).await;
    drop(app);

    let again = router(state(&data, &ckpt, None, Some(&journal)));
    let (_, curves) = call(&again, "GET", &format!("/sessions/{id}/cdvh"), None).await;
    assert_eq!(curves["structures"], last["structures"]);
    assert_eq!(curves["prompt_text"], "keep cord low");
    let (_, replayed) = call(&again, "GET", &format!("/sessions/{id}/history"), None).await;
    assert_eq!(replayed, hist);
    // New ids continue after the replayed ones.
    let b = create(&again, "phantom-000").await;
    assert_ne!(b["session_id"].as_str().unwrap(), id);
}
