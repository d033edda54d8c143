//! HTTP inference service over a frozen checkpoint.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, Multipart, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use cafegan::data::tensor_to_image;
use cafegan::evaluation::AttentionMaps;
use image::ImageFormat;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::model::Model;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn bad_request(code: &'static str, message: impl Into<String>) -> Self {
        Self { status: StatusCode::BAD_REQUEST, code, message: message.into() }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self { status: StatusCode::INTERNAL_SERVER_ERROR, code: "inference_failed", message: message.into() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": { "code": self.code, "message": self.message } });
        (self.status, Json(body)).into_response()
    }
}

/// JSON part of an edit or attention request.
#[derive(Debug, Default, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct EditRequest {
    pub toggles: Option<BTreeMap<String, u8>>,
    pub target_bits: Option<Vec<u8>>,
    #[serde(default)]
    pub include_attention: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionPayload {
    pub attribute: String,
    pub branch: String,
    /// Base64 grayscale PNG of the normalized map.
    pub map: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditResponse {
    pub image: String,
    pub attributes: Vec<String>,
    pub v_s: Vec<u8>,
    pub v_t: Vec<u8>,
    pub v_d: Vec<i8>,
    pub attention: Option<Vec<AttentionPayload>>,
    pub cafe_available: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionResponse {
    pub attributes: Vec<String>,
    pub attention: Vec<AttentionPayload>,
    pub cafe_available: bool,
}

pub fn router(model: Arc<Model>) -> Router {
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route("/attributes", get(attributes))
        .route("/edit", post(edit))
        .route("/attention", post(attention))
        .layer(DefaultBodyLimit::max(16 * 1024 * 1024))
        .with_state(model)
}

async fn attributes(State(m): State<Arc<Model>>) -> Json<serde_json::Value> {
    Json(json!({ "attributes": m.names, "model": m.id }))
}

struct Upload {
    image: image::DynamicImage,
    request: EditRequest,
}

async fn read_upload(mut mp: Multipart) -> Result<Upload, ApiError> {
    let mut image = None;
    let mut request = EditRequest::default();
    while let Some(field) = mp
        .next_field()
        .await
        .map_err(|e| ApiError::bad_request("bad_multipart", e.to_string()))?
    {
        let name = field.name().unwrap_or_default().to_string();
        let bytes = field.bytes().await.map_err(|e| ApiError::bad_request("bad_multipart", e.to_string()))?;
        match name.as_str() {
            "image" => {
                let img = image::load_from_memory(&bytes)
                    .map_err(|e| ApiError::bad_request("bad_image", format!("cannot decode image: {e}")))?;
                image = Some(img);
            }
            "request" => {
                request = serde_json::from_slice(&bytes)
                    .map_err(|e| ApiError::bad_request("bad_request_body", e.to_string()))?;
            }
            other => return Err(ApiError::bad_request("unknown_field", format!("unexpected form field `{other}`"))),
        }
    }
    let image = image.ok_or_else(|| ApiError::bad_request("missing_image", "form field `image` is required"))?;
    Ok(Upload { image, request })
}

fn png_base64(img: impl Into<image::DynamicImage>) -> Result<String, ApiError> {
    let mut buf = Cursor::new(Vec::new());
    img.into().write_to(&mut buf, ImageFormat::Png).map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(STANDARD.encode(buf.into_inner()))
}

fn attention_payloads(maps: &AttentionMaps) -> Result<Vec<AttentionPayload>, ApiError> {
    maps.af
        .iter()
        .chain(maps.cafe.iter().flatten())
        .map(|o| {
            Ok(AttentionPayload {
                attribute: o.attribute.clone(),
                branch: o.branch.tag().to_string(),
                map: png_base64(o.to_gray())?,
            })
        })
        .collect()
}

fn resolve_target(m: &Model, req: &EditRequest, v_s: &[u8]) -> Result<Vec<u8>, ApiError> {
    match (&req.toggles, &req.target_bits) {
        (Some(_), Some(_)) | (None, None) => Err(ApiError::bad_request(
            "bad_request_body",
            "exactly one of `toggles` and `target_bits` must be given",
        )),
        (None, Some(bits)) => {
            if bits.len() != m.k() || bits.iter().any(|&b| b > 1) {
                return Err(ApiError::bad_request(
                    "bad_target_bits",
                    format!("target_bits must be {} values in {{0, 1}}", m.k()),
                ));
            }
            Ok(bits.clone())
        }
        (Some(toggles), None) => {
            let mut v = v_s.to_vec();
            for (name, &bit) in toggles {
                let i = m.names.iter().position(|n| n == name).ok_or_else(|| {
                    ApiError::bad_request(
                        "unknown_attribute",
                        format!("unknown attribute `{name}`; valid attributes: {}", m.names.join(", ")),
                    )
                })?;
                if bit > 1 {
                    return Err(ApiError::bad_request("bad_toggle", format!("toggle {name} must be 0 or 1")));
                }
                v[i] = bit;
            }
            Ok(v)
        }
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::internal(e.to_string()))?
}

async fn edit(State(m): State<Arc<Model>>, mp: Multipart) -> Result<Json<EditResponse>, ApiError> {
    let up = read_upload(mp).await?;
    let resp = blocking(move || {
        let x = m.prepare(&up.image).map_err(|e| ApiError::bad_request("bad_image", e.to_string()))?;
        let v_s = m.estimate_source(&x).map_err(|e| ApiError::internal(e.to_string()))?;
        let v_t = resolve_target(&m, &up.request, &v_s)?;
        let (y, v_d) = m.edit(&x, &v_s, &v_t).map_err(|e| ApiError::internal(e.to_string()))?;
        let attention = if up.request.include_attention {
            let maps = m.attention(&x).map_err(|e| ApiError::internal(e.to_string()))?;
            Some(attention_payloads(&maps)?)
        } else {
            None
        };
        Ok(EditResponse {
            image: png_base64(tensor_to_image(&y))?,
            attributes: m.names.clone(),
            v_s,
            v_t,
            v_d,
            attention,
            cafe_available: m.discriminator.config.complementary,
        })
    })
    .await?;
    Ok(Json(resp))
}

async fn attention(State(m): State<Arc<Model>>, mp: Multipart) -> Result<Json<AttentionResponse>, ApiError> {
    let up = read_upload(mp).await?;
    let resp = blocking(move || {
        let x = m.prepare(&up.image).map_err(|e| ApiError::bad_request("bad_image", e.to_string()))?;
        let maps = m.attention(&x).map_err(|e| ApiError::internal(e.to_string()))?;
        Ok(AttentionResponse {
            attributes: m.names.clone(),
            attention: attention_payloads(&maps)?,
            cafe_available: maps.cafe.is_some(),
        })
    })
    .await?;
    Ok(Json(resp))
}

pub async fn serve(model: Arc<Model>, bind: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    eprintln!("serving {} on http://{}", model.id, listener.local_addr()?);
    axum::serve(listener, router(model))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
