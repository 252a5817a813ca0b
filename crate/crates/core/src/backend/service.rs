//! HTTP surface of the backend.

use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::State;
use axum::http::header::{AUTHORIZATION, CONTENT_TYPE};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};

use super::{Backend, BackendError};
use crate::protocol::{BackendErrorBody, CallbackNotification, TokenRequest, CALLBACK_AUTH_HEADER};

pub fn router(backend: Arc<Backend>) -> Router {
    Router::new()
        .route("/v1/token", post(issue))
        .route("/v1/callback", post(callback))
        .route("/v1/relay/chat/completions", post(relay))
        .route("/healthz", get(|| async { "ok" }))
        .with_state(backend)
}

fn error_response(status: StatusCode, code: &str) -> Response {
    (
        status,
        Json(BackendErrorBody {
            error: code.to_owned(),
        }),
    )
        .into_response()
}

impl IntoResponse for BackendError {
    fn into_response(self) -> Response {
        if self.status().is_server_error() {
            tracing::error!(error = %self, "backend failure");
        }
        error_response(self.status(), self.code())
    }
}

fn bearer(headers: &HeaderMap) -> &str {
    headers
        .get(AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(str::trim)
        .unwrap_or("")
}

async fn issue(State(backend): State<Arc<Backend>>, headers: HeaderMap, body: Bytes) -> Response {
    let request: TokenRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return BackendError::InvalidRequest(e.to_string()).into_response(),
    };
    let result = backend
        .authenticate_device(&request.device_id, bearer(&headers))
        .and_then(|()| backend.issue_token(&request.device_id, &request.model, request.max_tokens));
    match result {
        Ok(token) => Json(token).into_response(),
        Err(e) => {
            tracing::info!(device_id = %request.device_id, code = e.code(), "token refused");
            e.into_response()
        }
    }
}

async fn callback(State(backend): State<Arc<Backend>>, headers: HeaderMap, body: Bytes) -> Response {
    let auth = headers
        .get(CALLBACK_AUTH_HEADER)
        .and_then(|v| v.to_str().ok())
        .unwrap_or("");
    let notification: CallbackNotification = match serde_json::from_slice(&body) {
        Ok(n) => n,
        Err(e) => return BackendError::InvalidRequest(e.to_string()).into_response(),
    };
    match backend.handle_callback(&notification, auth) {
        Ok(_) => StatusCode::NO_CONTENT.into_response(),
        Err(e) => {
            tracing::warn!(jti = %notification.jti, code = e.code(), "callback refused");
            e.into_response()
        }
    }
}

/// Forwards an edge request to the provider under the backend's static key and
/// streams the answer back unchanged.
async fn relay(State(backend): State<Arc<Backend>>, headers: HeaderMap, body: Bytes) -> Response {
    let Some(relay) = &backend.config.relay else {
        return error_response(StatusCode::NOT_FOUND, "relay_disabled");
    };
    if !backend.relay_key_valid(bearer(&headers)) {
        return error_response(StatusCode::UNAUTHORIZED, "unauthorized");
    }
    let url = format!("{}/v1/chat/completions", relay.upstream_url.trim_end_matches('/'));
    let auth = format!("Bearer {}", relay.provider_key);
    let upstream = backend
        .relay_client
        .post(&url, &[("authorization", auth.as_str())], "application/json", body)
        .await;
    match upstream {
        Ok(resp) => {
            let mut out = Response::builder().status(resp.status);
            if let Some(ct) = resp.headers.get(CONTENT_TYPE) {
                out = out.header(CONTENT_TYPE, ct);
            }
            out.body(Body::new(resp.into_body()))
                .unwrap_or_else(|_| error_response(StatusCode::BAD_GATEWAY, "upstream_unavailable"))
        }
        Err(e) => {
            tracing::warn!(error = %e, "relay upstream failed");
            error_response(StatusCode::BAD_GATEWAY, "upstream_unavailable")
        }
    }
}
