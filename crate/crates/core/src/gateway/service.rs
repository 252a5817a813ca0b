//! HTTP surface of the gateway.

use std::convert::Infallible;
use std::sync::Arc;
use std::time::Duration;

use axum::body::{Body, Bytes};
use axum::extract::State;
use axum::http::header::{AUTHORIZATION, CONTENT_TYPE};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use tokio::sync::mpsc;

use super::{Authorization, CallbackTicket, EngineError, Gateway, Generation, Grant};
use crate::protocol::{
    CallbackNotification, Choice, ErrorBody, ErrorCode, ErrorDetail, FinishReason,
    InvocationRequest, InvocationResponse, StreamLine, Usage,
};

pub fn router(gateway: Arc<Gateway>) -> Router {
    Router::new()
        .route("/v1/chat/completions", post(chat_completions))
        .route("/healthz", get(|| async { "ok" }))
        .with_state(gateway)
}

fn error(status: StatusCode, code: ErrorCode, message: impl Into<String>) -> Response {
    let body = ErrorBody {
        error: ErrorDetail {
            code: code.as_str().to_owned(),
            message: message.into(),
        },
    };
    (status, Json(body)).into_response()
}

fn bearer(headers: &HeaderMap) -> &str {
    headers
        .get(AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(str::trim)
        .unwrap_or("")
}

async fn chat_completions(State(gw): State<Arc<Gateway>>, headers: HeaderMap, body: Bytes) -> Response {
    let request: InvocationRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, ErrorCode::InvalidRequest, e.to_string()),
    };
    if let Err(msg) = request.validate() {
        return error(StatusCode::BAD_REQUEST, ErrorCode::InvalidRequest, msg);
    }
    let auth = match gw.authorize(bearer(&headers), &request) {
        Ok(a) => a,
        Err(e) => return error(e.status(), e.wire_code(), e.wire_message()),
    };
    let generation = match gw.generate(&auth, &request) {
        Ok(g) => g,
        Err(e @ EngineError::UnknownModel(_)) => {
            return error(StatusCode::NOT_FOUND, ErrorCode::UnknownModel, e.to_string())
        }
        Err(e) => return error(StatusCode::BAD_GATEWAY, ErrorCode::EngineFailure, e.to_string()),
    };
    let id = match &auth.grant {
        Grant::Token(claims) => claims.jti.clone(),
        Grant::StaticKey { .. } => format!("static-{}", uuid::Uuid::new_v4()),
    };
    // Reserved before any byte of the response leaves, so that waiting for
    // idle callbacks after the client has its answer is race-free.
    let ticket = auth.claims().map(|_| gw.callbacks().ticket());
    if request.stream {
        stream_response(gw, auth, request, generation, id, ticket)
    } else {
        let usage = Usage {
            prompt_tokens: generation.prompt_tokens,
            completion_tokens: generation.completion_tokens(),
        };
        let response = InvocationResponse {
            id,
            model: request.model.clone(),
            choices: vec![Choice {
                index: 0,
                content: generation.content(),
            }],
            usage,
            finish_reason: generation.finish_reason,
        };
        gw.record_response(&auth, usage.completion_tokens);
        let body = Json(&response).into_response();
        notify(&gw, &auth, ticket, &request.model, usage, generation.finish_reason, response.content());
        body
    }
}

fn stream_response(
    gw: Arc<Gateway>,
    auth: Authorization,
    request: InvocationRequest,
    generation: Generation,
    id: String,
    ticket: Option<CallbackTicket>,
) -> Response {
    let (tx, rx) = mpsc::channel::<Bytes>(1);
    let delay = Duration::from_millis(gw.config().token_delay_ms);
    tokio::spawn(async move {
        let mut sent = 0usize;
        let mut disconnected = false;
        for token in &generation.tokens {
            if !delay.is_zero() {
                tokio::time::sleep(delay).await;
            }
            if tx.send(line(&StreamLine::Delta { delta: token.clone() })).await.is_err() {
                disconnected = true;
                break;
            }
            sent += 1;
        }
        let usage = Usage {
            prompt_tokens: generation.prompt_tokens,
            completion_tokens: sent as u32,
        };
        // A client that went away mid-stream got a truncated answer.
        let finish_reason = if disconnected {
            FinishReason::Length
        } else {
            generation.finish_reason
        };
        if disconnected {
            tracing::info!(%id, sent, "client disconnected mid-stream");
        } else {
            let last = StreamLine::Final {
                usage,
                finish_reason,
                id,
            };
            let _ = tx.send(line(&last)).await;
        }
        drop(tx);
        gw.record_response(&auth, usage.completion_tokens);
        let content = generation.tokens[..sent].concat();
        notify(&gw, &auth, ticket, &request.model, usage, finish_reason, &content);
    });
    let body = futures::stream::unfold(rx, |mut rx| async move {
        rx.recv().await.map(|b| (Ok::<_, Infallible>(b), rx))
    });
    Response::builder()
        .status(StatusCode::OK)
        .header(CONTENT_TYPE, "application/x-ndjson")
        .body(Body::from_stream(body))
        .expect("static response parts")
}

fn line(value: &StreamLine) -> Bytes {
    let mut v = serde_json::to_vec(value).expect("stream lines serialize");
    v.push(b'\n');
    v.into()
}

fn notify(
    gw: &Gateway,
    auth: &Authorization,
    ticket: Option<CallbackTicket>,
    model: &str,
    usage: Usage,
    finish_reason: FinishReason,
    content: &str,
) {
    let (Some(claims), Some(ticket)) = (auth.claims(), ticket) else {
        return;
    };
    let notification = CallbackNotification {
        jti: claims.jti.clone(),
        model: model.to_owned(),
        usage,
        finish_reason,
        response_content: content.to_owned(),
        completed_at: gw.now().as_secs(),
    };
    ticket.dispatch(claims.callback_url.clone(), notification);
}
