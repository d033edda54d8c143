mod common;

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use cafegan_cli::model::Model;
use cafegan_cli::service::{router, AttentionResponse, EditResponse};
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

const BOUNDARY: &str = "XtestBoundaryX";

fn model(no_cab: bool) -> Arc<Model> {
    Arc::new(Model::from_checkpoint(common::tiny_checkpoint(no_cab), "tiny".into()))
}

fn multipart(image: Option<&[u8]>, request: Option<&str>) -> Vec<u8> {
    let mut body = Vec::new();
    if let Some(img) = image {
        body.extend_from_slice(
            format!(
                "--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"image\"; filename=\"x.png\"\r\nContent-Type: image/png\r\n\r\n"
            )
            .as_bytes(),
        );
        body.extend_from_slice(img);
        body.extend_from_slice(b"\r\n");
    }
    if let Some(req) = request {
        body.extend_from_slice(
            format!("--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"request\"\r\nContent-Type: application/json\r\n\r\n{req}\r\n")
                .as_bytes(),
        );
    }
    body.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    body
}

async fn send(m: Arc<Model>, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = router(m).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

fn post(path: &str, body: Vec<u8>) -> Request<Body> {
    Request::post(path)
        .header("content-type", format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(body))
        .unwrap()
}

fn error_code(bytes: &[u8]) -> String {
    let v: Value = serde_json::from_slice(bytes).unwrap();
    v["error"]["code"].as_str().unwrap().to_string()
}

fn decode_png(b64: &str) -> image::DynamicImage {
    image::load_from_memory(&STANDARD.decode(b64).unwrap()).unwrap()
}

#[tokio::test]
async fn healthz_and_attributes() {
    let (s, body) = send(model(false), Request::get("/healthz").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body, b"ok");

    let (s, body) = send(model(false), Request::get("/attributes").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["model"], "tiny");
    assert_eq!(v["attributes"], serde_json::json!(["Hat_Band", "Chin_Patch", "Bright_Skin"]));
}

#[tokio::test]
async fn edit_with_toggles_returns_image_and_vectors() {
    let png = common::png_bytes(40, 48);
    let req = r#"{"toggles": {"Hat_Band": 1, "Chin_Patch": 0}, "include_attention": true}"#;
    let (s, body) = send(model(false), post("/edit", multipart(Some(&png), Some(req)))).await;
    assert_eq!(s, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let r: EditResponse = serde_json::from_slice(&body).unwrap();
    let img = decode_png(&r.image);
    assert_eq!((img.width(), img.height()), (32, 32));
    assert_eq!(r.v_t[0], 1);
    assert_eq!(r.v_t[1], 0);
    assert_eq!(r.v_t[2], r.v_s[2]);
    for i in 0..3 {
        assert_eq!(r.v_d[i], r.v_t[i] as i8 - r.v_s[i] as i8);
    }
    let att = r.attention.unwrap();
    assert_eq!(att.len(), 6);
    assert!(r.cafe_available);
    assert_eq!(decode_png(&att[0].map).width(), 32);
}

#[tokio::test]
async fn edit_with_target_bits() {
    let png = common::png_bytes(32, 32);
    let (s, body) = send(model(false), post("/edit", multipart(Some(&png), Some(r#"{"target_bits": [1, 1, 0]}"#)))).await;
    assert_eq!(s, StatusCode::OK);
    let r: EditResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(r.v_t, vec![1, 1, 0]);
    assert!(r.attention.is_none());
}

#[tokio::test]
async fn attention_endpoint_reports_missing_cafe_for_no_cab() {
    let png = common::png_bytes(32, 32);
    let (s, body) = send(model(false), post("/attention", multipart(Some(&png), None))).await;
    assert_eq!(s, StatusCode::OK);
    let r: AttentionResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(r.attention.len(), 6);
    assert!(r.attention.iter().any(|a| a.branch == "CAFE"));

    let (s, body) = send(model(true), post("/attention", multipart(Some(&png), None))).await;
    assert_eq!(s, StatusCode::OK);
    let r: AttentionResponse = serde_json::from_slice(&body).unwrap();
    assert!(!r.cafe_available);
    assert_eq!(r.attention.len(), 3);
    assert!(r.attention.iter().all(|a| a.branch == "AF"));
}

#[tokio::test]
async fn bad_inputs_are_client_errors() {
    let png = common::png_bytes(32, 32);
    let cases: Vec<(Vec<u8>, &str)> = vec![
        (multipart(None, Some(r#"{"target_bits": [0, 0, 0]}"#)), "missing_image"),
        (multipart(Some(b"not an image"), Some(r#"{"target_bits": [0, 0, 0]}"#)), "bad_image"),
        (multipart(Some(&png), Some(r#"{"toggles": {"Smiling": 1}}"#)), "unknown_attribute"),
        (multipart(Some(&png), Some(r#"{"toggles": {"Hat_Band": 2}}"#)), "bad_toggle"),
        (multipart(Some(&png), Some(r#"{"target_bits": [0, 1]}"#)), "bad_target_bits"),
        (multipart(Some(&png), Some(r#"{}"#)), "bad_request_body"),
        (multipart(Some(&png), Some(r#"{"target_bits": [0,0,0], "toggles": {}}"#)), "bad_request_body"),
        (multipart(Some(&png), Some("{not json")), "bad_request_body"),
    ];
    for (body, code) in cases {
        let (s, resp) = send(model(false), post("/edit", body)).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{code}");
        assert_eq!(error_code(&resp), code);
    }
}

#[tokio::test]
async fn unknown_route_is_404() {
    let (s, _) = send(model(false), Request::get("/nope").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}
