mod common;

use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{header, Request, StatusCode};
use axum::Router;
use common::{first_image, setup, tiny_config, Artifacts};
use prkt_cli::args::{RerankArgs, ServeArgs};
use prkt_cli::serve::{router, state_from_args, SearchResponse};
use prkt_core::dataset::load_manifest;
use prkt_core::retrieval::{embed_dataset, RerankParams};
use prkt_core::train::{fingerprint, save_checkpoint, train, Checkpoint};
use serde_json::{json, Value};
use tower::ServiceExt;

fn serve_args(a: &Artifacts, rerank: bool) -> ServeArgs {
    let d = RerankParams::default();
    ServeArgs {
        checkpoint: a.path("model.prkt"),
        embeddings: a.path("all.pemb"),
        image_root: a.data.clone(),
        host: "127.0.0.1".into(),
        port: 0,
        k: 5,
        rerank: RerankArgs {
            rerank,
            k1: 6,
            k2: d.k2.min(3),
            lambda: d.lambda,
        },
    }
}

fn app() -> (Artifacts, Router) {
    let a = setup();
    let mut cfg = tiny_config();
    cfg.manifest = Some(a.manifest.clone());
    let out = train(&cfg).unwrap();
    let ck = Checkpoint {
        params: out.params,
        classes: out.classes,
        train_config: Some(cfg.clone()),
        optimizer: None,
    };
    save_checkpoint(&a.path("model.prkt"), &ck).unwrap();
    let manifest = load_manifest(&a.manifest).unwrap();
    let mut store = embed_dataset(&ck.params, &manifest, None, cfg.augment.eval_size, 16).unwrap();
    store.fingerprint = Some(fingerprint(&ck.to_bytes()));
    store.save(&a.path("all.pemb")).unwrap();
    let state = state_from_args(&serve_args(&a, false)).unwrap();
    (a, router(Arc::new(state)))
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec())
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Vec<u8>) {
    send(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn post_json(app: &Router, body: Value) -> (StatusCode, Value) {
    let req = Request::post("/api/search")
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let (status, bytes) = send(app, req).await;
    (status, serde_json::from_slice(&bytes).unwrap())
}

fn multipart(parts: &[(&str, Option<&str>, &[u8])]) -> Request<Body> {
    let boundary = "prkt-test-boundary";
    let mut body = Vec::new();
    for (name, filename, data) in parts {
        body.extend(format!("--{boundary}\r\nContent-Disposition: form-data; name=\"{name}\"").bytes());
        if let Some(f) = filename {
            body.extend(format!("; filename=\"{f}\"\r\nContent-Type: image/png").bytes());
        }
        body.extend(b"\r\n\r\n");
        body.extend(*data);
        body.extend(b"\r\n");
    }
    body.extend(format!("--{boundary}--\r\n").bytes());
    Request::post("/api/search")
        .header(header::CONTENT_TYPE, format!("multipart/form-data; boundary={boundary}"))
        .body(Body::from(body))
        .unwrap()
}

#[tokio::test]
async fn health_reports_gallery_size() {
    let (_a, app) = app();
    let (status, body) = get(&app, "/api/health").await;
    assert_eq!(status, StatusCode::OK);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v, json!({ "status": "ok", "gallery_size": 24 }));
}

#[tokio::test]
async fn gallery_ref_query_finds_itself_first() {
    let (a, app) = app();
    let img = first_image(&a.data);
    let (status, v) = post_json(&app, json!({ "gallery_ref": img, "k": 3 })).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    let resp: SearchResponse = serde_json::from_value(v).unwrap();
    assert_eq!(resp.k, 3);
    assert!(!resp.rerank_used);
    assert_eq!(resp.hits.len(), 3);
    assert_eq!(resp.hits[0].image_ref, img);
    assert_eq!(resp.hits[0].rank, 1);
    assert!((resp.hits[0].score - 1.0).abs() < 1e-5);
    assert!(resp.hits.windows(2).all(|w| w[0].score >= w[1].score));
    assert_eq!(resp.hits[0].image_url, format!("/api/images/{img}"));
}

#[tokio::test]
async fn uploaded_gallery_image_finds_itself_first() {
    let (a, app) = app();
    let img = first_image(&a.data);
    let png = std::fs::read(a.data.join(&img)).unwrap();
    let (status, body) = send(&app, multipart(&[("image", Some("q.png"), &png), ("k", None, b"4")])).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let resp: SearchResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(resp.hits.len(), 4);
    assert_eq!(resp.hits[0].image_ref, img);
    assert!((resp.hits[0].score - 1.0).abs() < 1e-5);
}

#[tokio::test]
async fn rerank_with_lambda_one_keeps_order() {
    let (a, _) = app();
    let img = first_image(&a.data);
    let mut args = serve_args(&a, true);
    args.rerank.lambda = 1.0;
    let app = router(Arc::new(state_from_args(&args).unwrap()));
    let (_, rr) = post_json(&app, json!({ "gallery_ref": img, "k": 24 })).await;
    let (_, plain) = post_json(&app, json!({ "gallery_ref": img, "k": 24, "rerank": false })).await;
    assert_eq!(rr["rerank_used"], true);
    let order = |v: &Value| -> Vec<String> {
        v["hits"].as_array().unwrap().iter().map(|h| h["image_ref"].as_str().unwrap().to_string()).collect()
    };
    assert_eq!(order(&rr), order(&plain));
}

#[tokio::test]
async fn images_are_served_only_from_the_gallery() {
    let (a, app) = app();
    let img = first_image(&a.data);
    let (status, bytes) = get(&app, &format!("/api/images/{img}")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(bytes, std::fs::read(a.data.join(&img)).unwrap());
    let (status, _) = get(&app, "/api/images/manifest.jsonl").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = get(&app, "/api/images/..%2F..%2Fetc%2Fpasswd").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn malformed_requests_get_json_errors() {
    let (_a, app) = app();
    let req = Request::post("/api/search")
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from("{not json"))
        .unwrap();
    let (status, body) = send(&app, req).await;
    assert!(status.is_client_error());
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert!(v["error"].is_string());

    let (status, v) = post_json(&app, json!({ "k": 3 })).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(v["error"].as_str().unwrap().contains("gallery_ref"));

    let (status, _) = post_json(&app, json!({ "gallery_ref": "nope.png" })).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (status, v) = post_json(&app, json!({ "gallery_ref": "x", "k": 0 })).await;
    assert!(status.is_client_error(), "{v}");

    let (status, body) = send(&app, multipart(&[("image", Some("q.png"), b"not an image")])).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(String::from_utf8_lossy(&body).contains("query image"));
}

#[tokio::test]
async fn concurrent_searches_agree() {
    let (a, app) = app();
    let img = first_image(&a.data);
    let tasks: Vec<_> = (0..8)
        .map(|_| {
            let app = app.clone();
            let img = img.clone();
            tokio::spawn(async move { post_json(&app, json!({ "gallery_ref": img, "k": 10 })).await.1 })
        })
        .collect();
    let mut results = Vec::new();
    for t in tasks {
        results.push(t.await.unwrap());
    }
    assert!(results.windows(2).all(|w| w[0] == w[1]));
}

#[tokio::test]
async fn index_page_is_served() {
    let (_a, app) = app();
    let (status, body) = get(&app, "/").await;
    assert_eq!(status, StatusCode::OK);
    assert!(String::from_utf8_lossy(&body).contains("/api/search"));
}

#[test]
fn busy_port_is_a_startup_error() {
    let (a, _) = app();
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let mut args = serve_args(&a, false);
    args.port = taken.local_addr().unwrap().port();
    let err = prkt_cli::serve::run(&args).unwrap_err().to_string();
    assert!(err.contains("cannot listen"), "{err}");
}
