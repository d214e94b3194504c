//! HTTP endpoints through the router, without binding a socket.

mod common;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use tab_core::model::BottleneckKind;
use tab_service::api::{router, AppState, InferResponse, SamplePage, SampleDetail};
use tower::ServiceExt;
use tower_http::cors::CorsLayer;

fn app() -> Router {
    let state = AppState::new(common::small_model(BottleneckKind::Tab), common::small_dataset(), None).unwrap();
    router(state, CorsLayer::permissive())
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = req.body(body.map_or(Body::empty(), |b| Body::from(b.to_string()))).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn infer_of(v: Value) -> InferResponse {
    serde_json::from_value(v).unwrap()
}

#[tokio::test]
async fn health_and_sample_listing() {
    let app = app();
    let (s, v) = call(&app, "GET", "/api/health", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "ok");
    assert_eq!(v["samples"], 20);
    let (s, v) = call(&app, "GET", "/api/samples?offset=5&limit=4", None).await;
    assert_eq!(s, StatusCode::OK);
    let page: SamplePage = serde_json::from_value(v).unwrap();
    assert_eq!((page.total, page.offset, page.items.len()), (20, 5, 4));
    assert_eq!(page.items[0].id, 5);
    let (s, v) = call(&app, "GET", "/api/samples/7", None).await;
    assert_eq!(s, StatusCode::OK);
    let detail: SampleDetail = serde_json::from_value(v).unwrap();
    assert_eq!(detail.manifest.id, 7);
    assert_eq!(detail.image_a.data.len(), 64 * 64 * 3);
}

#[tokio::test]
async fn unknown_ids_are_404() {
    let app = app();
    assert_eq!(call(&app, "GET", "/api/samples/999", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "POST", "/api/infer", Some(json!({"id": 999}))).await.0, StatusCode::NOT_FOUND);
    let (s, v) = call(&app, "POST", "/api/edit", Some(json!({"id": 999, "edit": {"kind": "zero"}}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert!(v["error"].as_str().unwrap().contains("999"));
}

#[tokio::test]
async fn infer_serialises_the_attention_state() {
    let app = app();
    let (s, v) = call(&app, "POST", "/api/infer", Some(json!({"id": 2}))).await;
    assert_eq!(s, StatusCode::OK);
    let r = infer_of(v);
    assert_eq!(r.id, 2);
    assert!(r.base_caption.is_none());
    for side in &r.sides {
        assert_eq!(side.a_cls.len(), 65);
        assert!((side.a_cls.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert_eq!(side.heatmap.len(), 8);
        assert_eq!(side.heatmap.concat(), side.a_cls[1..]);
        assert!((side.gate - side.a_cls[1..].iter().sum::<f64>()).abs() < 1e-6);
    }
}

#[tokio::test]
async fn zero_edits_give_one_caption_and_noop_edits_change_nothing() {
    let app = app();
    let mut zero_captions = Vec::new();
    for id in [0, 4, 9, 13] {
        let (s, v) = call(&app, "POST", "/api/edit", Some(json!({"id": id, "edit": {"kind": "zero"}}))).await;
        assert_eq!(s, StatusCode::OK);
        let r = infer_of(v);
        assert!(r.sides.iter().all(|s| s.gate == 0.0));
        zero_captions.push(r.caption);

        let (_, v) = call(&app, "POST", "/api/infer", Some(json!({"id": id}))).await;
        let base = infer_of(v);
        let row = base.sides[0].a_cls.clone();
        let edit = json!({"id": id, "edit": {"kind": "custom", "side": "first", "row": row}});
        let (s, v) = call(&app, "POST", "/api/edit", Some(edit)).await;
        assert_eq!(s, StatusCode::OK);
        let same = infer_of(v);
        assert_eq!(same.caption, base.caption);
        assert_eq!(same.base_caption.as_deref(), Some(base.caption.as_str()));
    }
    assert!(zero_captions.iter().all(|c| c == &zero_captions[0]));
}

#[tokio::test]
async fn malformed_rows_are_422_with_the_field_path() {
    let app = app();
    let edit = json!({"id": 1, "edit": {"kind": "custom", "row": [1.0, 0.0]}});
    let (s, v) = call(&app, "POST", "/api/edit", Some(edit)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["field"], "edit.row");
    let mut row = vec![0.0; 65];
    row[4] = 2.0;
    let edit = json!({"id": 1, "edit": {"kind": "custom", "row": row, "strict": true}});
    let (s, v) = call(&app, "POST", "/api/edit", Some(edit)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["field"], "edit.row[4]");
    let (s, _) = call(&app, "POST", "/api/edit", Some(json!({"id": 1, "edit": {"kind": "blur"}}))).await;
    assert!(s.is_client_error());
}

#[tokio::test]
async fn concurrent_requests_are_independent() {
    let app = app();
    let solo_a = call(&app, "POST", "/api/infer", Some(json!({"id": 3}))).await.1;
    let solo_b = call(&app, "POST", "/api/infer", Some(json!({"id": 8}))).await.1;
    let zero = json!({"id": 8, "edit": {"kind": "zero"}});
    let (a, e, b) = tokio::join!(
        call(&app, "POST", "/api/infer", Some(json!({"id": 3}))),
        call(&app, "POST", "/api/edit", Some(zero)),
        call(&app, "POST", "/api/infer", Some(json!({"id": 8}))),
    );
    assert_eq!((a.0, e.0, b.0), (StatusCode::OK, StatusCode::OK, StatusCode::OK));
    assert_eq!(a.1, solo_a);
    assert_eq!(b.1, solo_b);
}

#[tokio::test]
async fn report_is_computed_once_and_cached() {
    let app = app();
    let (s, first) = call(&app, "GET", "/api/report", None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(first["pg_plus"]["mean"].as_f64().unwrap().is_finite());
    assert_eq!(call(&app, "GET", "/api/report", None).await.1, first);
}

#[tokio::test]
async fn cors_headers_are_sent() {
    let app = app();
    let req = Request::builder()
        .uri("/api/health")
        .header("origin", "http://localhost:5173")
        .body(Body::empty())
        .unwrap();
    let resp = app.oneshot(req).await.unwrap();
    assert!(resp.headers().contains_key("access-control-allow-origin"));
}
