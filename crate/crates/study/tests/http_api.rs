use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use bokeh_core::image::save_image;
use bokeh_core::study::{Study, StudyConfig};
use bokeh_core::ImageF;
use bokeh_study::{router, AppState};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

const TOKEN: &str = "op-secret";

fn config(dir: &Path) -> StudyConfig {
    let ids = ["a", "b", "c"];
    let mut method_dirs = BTreeMap::new();
    for sub in ["reference", "hidden_alpha", "hidden_beta"] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).unwrap();
        for id in ids {
            save_image(&ImageF::constant(4, 4, 3, 0.5), d.join(format!("{id}.png"))).unwrap();
        }
        if sub != "reference" {
            method_dirs.insert(sub.to_string(), d);
        }
    }
    StudyConfig {
        study_id: "ebb".into(),
        reference_dir: dir.join("reference"),
        method_dirs,
        image_ids: ids.iter().map(|s| s.to_string()).collect(),
        ratings_per_pair_target: 1,
        shuffle_seed: 3,
    }
}

fn app(dir: &Path, ui: Option<&Path>) -> Router {
    let study = Study::open(config(dir), &dir.join("data")).unwrap();
    router(AppState::new(Arc::new(study), Some(TOKEN.into())), ui.map(Path::to_path_buf))
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, body)
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (s, b) = call(app, Request::get(uri).body(Body::empty()).unwrap()).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn rate(app: &Router, session: &str, task: &str, level: Value) -> (StatusCode, Value) {
    let body = json!({"session_id": session, "task_id": task, "level": level}).to_string();
    let req = Request::post("/api/study/ebb/rating")
        .header("content-type", "application/json")
        .body(Body::from(body))
        .unwrap();
    let (s, b) = call(app, req).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

#[tokio::test]
async fn full_session_is_blind_and_completes() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), None);
    let mut seen = Vec::new();
    loop {
        let (s, task) = get(&app, "/api/study/ebb/task?session=r1").await;
        assert_eq!(s, StatusCode::OK);
        let text = task.to_string();
        assert!(!text.contains("hidden_"), "method name leaked: {text}");
        if task["status"] == "complete" {
            assert_eq!(task["progress"], json!({"rated": 6, "total": 6}));
            break;
        }
        for key in ["reference", "candidate"] {
            let tok = task[key].as_str().unwrap();
            let (s, bytes) = call(&app, Request::get(format!("/img/{tok}")).body(Body::empty()).unwrap()).await;
            assert_eq!(s, StatusCode::OK);
            assert_eq!(&bytes[1..4], b"PNG");
        }
        let id = task["task_id"].as_str().unwrap().to_string();
        let (s, ack) = rate(&app, "r1", &id, json!(4)).await;
        assert_eq!(s, StatusCode::OK);
        assert!(!ack.to_string().contains("hidden_"));
        seen.push(id);
    }
    assert_eq!(seen.len(), 6);
}

#[tokio::test]
async fn rating_errors_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), None);
    let (_, task) = get(&app, "/api/study/ebb/task?session=r1").await;
    let id = task["task_id"].as_str().unwrap();
    assert_eq!(rate(&app, "r1", id, json!(0)).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(rate(&app, "r1", id, json!(2.5)).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(rate(&app, "r1", "feedbeef", json!(3)).await.0, StatusCode::NOT_FOUND);
    assert_eq!(rate(&app, "r1", id, json!(5)).await.0, StatusCode::OK);
    let (s, body) = rate(&app, "r1", id, json!(5)).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(body["error"], "conflict");
    let (s, _) = call(
        &app,
        Request::post("/api/study/ebb/rating").body(Body::from("not json")).unwrap(),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(get(&app, "/api/study/nope/task?session=r1").await.0, StatusCode::NOT_FOUND);
    assert_eq!(get(&app, "/api/study/ebb/task").await.0, StatusCode::BAD_REQUEST);
    assert_eq!(get(&app, "/img/0000").await.0, StatusCode::NOT_FOUND);
    let log = std::fs::read_to_string(dir.path().join("data/ratings.ndjson")).unwrap();
    assert_eq!(log.lines().count(), 1);
}

#[tokio::test]
async fn results_and_export_need_the_operator_token() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), None);
    for s in ["r1", "r2"] {
        let (_, task) = get(&app, &format!("/api/study/ebb/task?session={s}")).await;
        rate(&app, s, task["task_id"].as_str().unwrap(), json!(5)).await;
    }
    assert_eq!(get(&app, "/api/study/ebb/results").await.0, StatusCode::UNAUTHORIZED);
    let wrong = Request::get("/api/study/ebb/results").header("authorization", "Bearer nope").body(Body::empty()).unwrap();
    assert_eq!(call(&app, wrong).await.0, StatusCode::UNAUTHORIZED);

    let ok = Request::get("/api/study/ebb/results")
        .header("authorization", format!("Bearer {TOKEN}"))
        .body(Body::empty())
        .unwrap();
    let (s, body) = call(&app, ok).await;
    assert_eq!(s, StatusCode::OK);
    let results: Value = serde_json::from_slice(&body).unwrap();
    let total: u64 = results.as_array().unwrap().iter().map(|r| r["rating_count"].as_u64().unwrap()).sum();
    assert_eq!(total, 2);

    let exp = Request::get("/api/study/ebb/export").header("x-operator-token", TOKEN).body(Body::empty()).unwrap();
    let (s, body) = call(&app, exp).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(String::from_utf8(body).unwrap().lines().count(), 2);
}

#[tokio::test]
async fn results_disabled_without_token() {
    let dir = tempfile::tempdir().unwrap();
    let study = Study::ephemeral(config(dir.path())).unwrap();
    let app = router(AppState::new(Arc::new(study), None), None);
    let req = Request::get("/api/study/ebb/results").header("authorization", "Bearer ").body(Body::empty()).unwrap();
    assert_eq!(call(&app, req).await.0, StatusCode::FORBIDDEN);
}

#[tokio::test]
async fn serves_ui_bundle_and_study_info() {
    let dir = tempfile::tempdir().unwrap();
    let ui = dir.path().join("ui");
    std::fs::create_dir_all(&ui).unwrap();
    std::fs::write(ui.join("index.html"), "<!doctype html><title>rate</title>").unwrap();
    let app = app(dir.path(), Some(&ui));
    let (s, body) = call(&app, Request::get("/").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    assert!(String::from_utf8(body).unwrap().contains("rate"));
    let (s, info) = get(&app, "/api/study/ebb").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(info["total"], 6);
    assert_eq!(info["scale"][0], "5 - comparable perceptual quality");
    assert!(!info.to_string().contains("hidden_"));
}
