//! Review API contract, driven through the router without a socket.

mod common;

use annotate_cli::server::{router, AppState};
use annotate_core::dataset::Dataset;
use annotate_core::review::{ExportRow, Progress, ReviewItem, ReviewStore};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

struct Fixture {
    _dir: tempfile::TempDir,
    review_dir: std::path::PathBuf,
    dataset: Dataset,
    app: Router,
}

fn fixture(n: usize, coverage: f64) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    triaged_dir(dir.path(), n, coverage);
    let dataset = Dataset::load(&dir.path().join("dataset.jsonl"), &dir.path().join("schemas.json")).unwrap();
    let review_dir = dir.path().join("review");
    let store = ReviewStore::open(&review_dir).unwrap();
    let app = router(AppState::new(store, dataset.clone()), None);
    Fixture {
        _dir: dir,
        review_dir,
        dataset,
        app,
    }
}

fn triaged_dir(dir: &std::path::Path, n: usize, coverage: f64) {
    common::triaged_project(dir, n, coverage);
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn get_json<T: serde::de::DeserializeOwned>(app: &Router, uri: &str) -> T {
    let (status, body) = call(app, "GET", uri, None).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    serde_json::from_slice(&body).unwrap()
}

async fn export_rows(app: &Router) -> Vec<ExportRow> {
    let (status, body) = call(app, "GET", "/api/export", None).await;
    assert_eq!(status, StatusCode::OK);
    String::from_utf8(body)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[tokio::test]
async fn queue_is_ordered_and_sized_by_coverage() {
    let f = fixture(100, 0.65);
    let progress: Progress = get_json(&f.app, "/api/progress").await;
    assert_eq!(progress.total, 35);
    assert_eq!(progress.auto_accepted, 65);
    assert_eq!((progress.reviewed, progress.remaining), (0, 35));

    let items: Vec<ReviewItem> = get_json(&f.app, "/api/queue?limit=100").await;
    assert_eq!(items.len(), 35);
    assert!(items
        .windows(2)
        .all(|w| (w[0].rel_index, &w[0].instance_id) < (w[1].rel_index, &w[1].instance_id)));
    let first: Vec<ReviewItem> = get_json(&f.app, "/api/queue?limit=5").await;
    assert_eq!(first, items[..5].to_vec());

    // Options are in the schema's canonical order.
    for item in &items {
        let inst = f.dataset.get(&item.instance_id).unwrap();
        let labels: Vec<&str> = item.options.iter().map(|o| o.label.as_str()).collect();
        let canonical: Vec<&str> = f.dataset.schema_for(inst).labels.iter().map(String::as_str).collect();
        assert_eq!(labels, canonical);
    }
}

#[tokio::test]
async fn decisions_are_validated_counted_and_exported() {
    let f = fixture(100, 0.65);
    let before = export_rows(&f.app).await;
    let items: Vec<ReviewItem> = get_json(&f.app, "/api/queue?limit=1").await;
    let item = &items[0];

    let (status, _) = call(
        &f.app,
        "POST",
        "/api/decision",
        Some(json!({"instance_id": "nope", "label": "no_other", "reviewer": "r1"})),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(
        &f.app,
        "POST",
        "/api/decision",
        Some(json!({"instance_id": item.instance_id, "label": "not_a_label", "reviewer": "r1"})),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let relabel = item.options.iter().find(|o| o.label != item.selected).unwrap().label.clone();
    let (status, body) = call(
        &f.app,
        "POST",
        "/api/decision",
        Some(json!({"instance_id": item.instance_id, "label": relabel, "reviewer": "r1"})),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let outcome: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(outcome["remaining"], 34);

    let progress: Progress = get_json(&f.app, "/api/progress").await;
    assert_eq!((progress.reviewed, progress.remaining), (1, 34));
    let queue: Vec<ReviewItem> = get_json(&f.app, "/api/queue?limit=100").await;
    assert!(queue.iter().all(|i| i.instance_id != item.instance_id));

    let after = export_rows(&f.app).await;
    assert_eq!(after.len(), 100);
    let changed: Vec<&str> = before
        .iter()
        .zip(&after)
        .filter(|(a, b)| a.label != b.label)
        .map(|(a, _)| a.id.as_str())
        .collect();
    assert_eq!(changed, vec![item.instance_id.as_str()]);
    assert_eq!(export_rows(&f.app).await, after, "re-export is idempotent");

    // The decision is on disk before the response: a fresh store sees it.
    let reopened = ReviewStore::open(&f.review_dir).unwrap();
    assert_eq!(reopened.progress().reviewed, 1);
    assert_eq!(reopened.export(&f.dataset).unwrap(), after);
}

#[tokio::test]
async fn repeated_decision_supersedes() {
    let f = fixture(60, 0.5);
    let items: Vec<ReviewItem> = get_json(&f.app, "/api/queue?limit=1").await;
    let id = &items[0].instance_id;
    let labels: Vec<String> = items[0].options.iter().map(|o| o.label.clone()).collect();
    let post = |label: String| {
        let app = f.app.clone();
        let id = id.clone();
        async move { call(&app, "POST", "/api/decision", Some(json!({"instance_id": id, "label": label, "reviewer": "r"}))).await }
    };
    let (s1, _) = post(labels[0].clone()).await;
    let (s2, body) = post(labels[1].clone()).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    let outcome: Value = serde_json::from_slice(&body).unwrap();
    assert!(outcome["superseded"].is_u64());
    let progress: Progress = get_json(&f.app, "/api/progress").await;
    assert_eq!(progress.reviewed, 1);
    let row = export_rows(&f.app).await.into_iter().find(|r| &r.id == id).unwrap();
    assert_eq!(row.label, labels[1]);
}

#[tokio::test]
async fn empty_queue_returns_empty_list() {
    let f = fixture(30, 1.0);
    let items: Vec<Value> = get_json(&f.app, "/api/queue").await;
    assert!(items.is_empty());
    let progress: Progress = get_json(&f.app, "/api/progress").await;
    assert_eq!((progress.total, progress.auto_accepted), (0, 30));
    assert_eq!(progress.mean_rel_index_remaining, None);
}

#[tokio::test]
async fn static_assets_served_at_root() {
    let dir = tempfile::tempdir().unwrap();
    triaged_dir(dir.path(), 20, 0.5);
    let ui = dir.path().join("ui");
    std::fs::create_dir_all(&ui).unwrap();
    std::fs::write(ui.join("index.html"), "<h1>review</h1>").unwrap();
    let dataset = Dataset::load(&dir.path().join("dataset.jsonl"), &dir.path().join("schemas.json")).unwrap();
    let store = ReviewStore::open(&dir.path().join("review")).unwrap();
    let app = router(AppState::new(store, dataset), Some(ui));
    let (status, body) = call(&app, "GET", "/", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, b"<h1>review</h1>");
    let progress: Progress = get_json(&app, "/api/progress").await;
    assert_eq!(progress.total, 10);
}
