//! Edge-device client: asks the backend for a token, then calls the provider
//! gateway directly with it.
//!
//! The client never holds a provider credential; [`EdgeConfig`] has no field
//! that could carry one.

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::{HttpClient, HttpResponse, TransportError};
use crate::protocol::{
    BackendErrorBody, ChatMessage, Choice, ErrorBody, InvocationRequest, InvocationResponse,
    StreamLine, TokenRequest, TokenResponse,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeConfig {
    pub backend_url: String,
    pub gateway_url: String,
    pub device_id: String,
    /// Authenticates the device to its own backend only.
    pub device_secret: String,
    pub default_model: String,
    #[serde(with = "millis")]
    pub request_timeout: Duration,
}

mod millis {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

impl EdgeConfig {
    pub fn validate(&self) -> Result<(), EdgeError> {
        for url in [&self.backend_url, &self.gateway_url] {
            let ok = url
                .parse::<http::Uri>()
                .is_ok_and(|u| u.scheme_str() == Some("http") && u.authority().is_some());
            if !ok {
                return Err(EdgeError::Config(format!("bad url {url:?}")));
            }
        }
        if self.request_timeout.is_zero() {
            return Err(EdgeError::Config("request_timeout must be positive".into()));
        }
        if self.device_id.is_empty() {
            return Err(EdgeError::Config("device_id is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum EdgeError {
    #[error("invalid edge configuration: {0}")]
    Config(String),
    #[error("backend unavailable: {0}")]
    BackendUnavailable(#[source] TransportError),
    #[error("backend refused to issue a token ({status}): {code}")]
    IssueRefused { status: u16, code: String },
    #[error("gateway rejected the request ({status}): {code}: {message}")]
    Gateway {
        status: u16,
        code: String,
        message: String,
    },
    #[error("gateway unreachable: {0}")]
    Transport(#[source] TransportError),
    #[error("protocol violation: {0}")]
    Protocol(String),
}

impl EdgeError {
    /// Machine-readable gateway error code, if the gateway produced one.
    pub fn gateway_code(&self) -> Option<&str> {
        match self {
            EdgeError::Gateway { code, .. } => Some(code),
            _ => None,
        }
    }
}

/// Called with the attempt number (starting at 1) and the freshly issued
/// token just before it is sent to the gateway. Tests use it to tamper with
/// tokens or to move an injected clock.
pub type TokenHook = Arc<dyn Fn(u32, &mut String) + Send + Sync>;

#[derive(Clone)]
pub struct EdgeClient {
    config: EdgeConfig,
    http: HttpClient,
    hook: Option<TokenHook>,
}

impl std::fmt::Debug for EdgeClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EdgeClient")
            .field("device_id", &self.config.device_id)
            .field("backend_url", &self.config.backend_url)
            .field("gateway_url", &self.config.gateway_url)
            .finish()
    }
}

/// Everything the gateway returned for one successful call, streamed or not.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatOutcome {
    pub response: InvocationResponse,
    /// Tokens requested from the backend for this call (1 or 2).
    pub issues: u32,
}

impl EdgeClient {
    pub fn new(config: EdgeConfig) -> Result<Self, EdgeError> {
        config.validate()?;
        let http = HttpClient::new(config.request_timeout);
        Ok(EdgeClient {
            config,
            http,
            hook: None,
        })
    }

    /// Replaces the transport, e.g. with a metered one. The configured
    /// timeout is kept only if the given client uses it.
    pub fn with_http(mut self, http: HttpClient) -> Self {
        self.http = http;
        self
    }

    pub fn with_token_hook(mut self, hook: TokenHook) -> Self {
        self.hook = Some(hook);
        self
    }

    pub fn config(&self) -> &EdgeConfig {
        &self.config
    }

    pub fn http(&self) -> &HttpClient {
        &self.http
    }

    pub async fn acquire_token(&self, model: &str, max_tokens: u32) -> Result<TokenResponse, EdgeError> {
        let url = format!("{}/v1/token", self.config.backend_url.trim_end_matches('/'));
        let auth = format!("Bearer {}", self.config.device_secret);
        let request = TokenRequest {
            device_id: self.config.device_id.clone(),
            model: model.to_owned(),
            max_tokens,
        };
        let resp = self
            .http
            .post_json(&url, &[("authorization", auth.as_str())], &request)
            .await
            .map_err(EdgeError::BackendUnavailable)?;
        let status = resp.status;
        let body = resp.bytes().await.map_err(EdgeError::BackendUnavailable)?;
        if !status.is_success() {
            let code = serde_json::from_slice::<BackendErrorBody>(&body)
                .map(|b| b.error)
                .unwrap_or_else(|_| String::from_utf8_lossy(&body).into_owned());
            return Err(EdgeError::IssueRefused {
                status: status.as_u16(),
                code,
            });
        }
        serde_json::from_slice(&body).map_err(|e| EdgeError::Protocol(format!("token response: {e}")))
    }

    /// Non-streamed chat call.
    pub async fn chat(
        &self,
        messages: Vec<ChatMessage>,
        model: Option<&str>,
        max_tokens: u32,
    ) -> Result<ChatOutcome, EdgeError> {
        self.run(messages, model, max_tokens, false, &mut |_| {}).await
    }

    /// Streamed chat call; `on_delta` sees each chunk as it arrives.
    pub async fn chat_stream(
        &self,
        messages: Vec<ChatMessage>,
        model: Option<&str>,
        max_tokens: u32,
        on_delta: &mut (dyn FnMut(&str) + Send),
    ) -> Result<ChatOutcome, EdgeError> {
        self.run(messages, model, max_tokens, true, on_delta).await
    }

    async fn run(
        &self,
        messages: Vec<ChatMessage>,
        model: Option<&str>,
        max_tokens: u32,
        stream: bool,
        on_delta: &mut (dyn FnMut(&str) + Send),
    ) -> Result<ChatOutcome, EdgeError> {
        let model = model.unwrap_or(&self.config.default_model).to_owned();
        let request = InvocationRequest {
            model: model.clone(),
            messages,
            max_tokens: None,
            stream,
        };
        let mut attempt = 0;
        loop {
            attempt += 1;
            let mut token = self.acquire_token(&model, max_tokens).await?.token;
            if let Some(hook) = &self.hook {
                hook(attempt, &mut token);
            }
            match invoke(&self.http, &self.config.gateway_url, &token, &request, on_delta).await {
                Err(e) if attempt == 1 && e.gateway_code() == Some("expired") => {
                    tracing::info!("token expired before use; requesting a new one");
                }
                Err(e) => return Err(e),
                Ok(response) => {
                    return Ok(ChatOutcome {
                        response,
                        issues: attempt,
                    })
                }
            }
        }
    }
}

/// One call to a gateway-shaped endpoint with the given bearer credential.
/// Shared by the edge client and the baseline clients.
pub async fn invoke(
    http: &HttpClient,
    base_url: &str,
    bearer: &str,
    request: &InvocationRequest,
    on_delta: &mut (dyn FnMut(&str) + Send),
) -> Result<InvocationResponse, EdgeError> {
    invoke_path(http, base_url, "/v1/chat/completions", bearer, request, on_delta).await
}

pub async fn invoke_path(
    http: &HttpClient,
    base_url: &str,
    path: &str,
    bearer: &str,
    request: &InvocationRequest,
    on_delta: &mut (dyn FnMut(&str) + Send),
) -> Result<InvocationResponse, EdgeError> {
    let url = format!("{}{path}", base_url.trim_end_matches('/'));
    let auth = format!("Bearer {bearer}");
    let resp = http
        .post_json(&url, &[("authorization", auth.as_str())], request)
        .await
        .map_err(EdgeError::Transport)?;
    if !resp.status.is_success() {
        let status = resp.status.as_u16();
        let body = resp.bytes().await.map_err(EdgeError::Transport)?;
        return Err(match serde_json::from_slice::<ErrorBody>(&body) {
            Ok(b) => EdgeError::Gateway {
                status,
                code: b.error.code,
                message: b.error.message,
            },
            Err(_) => EdgeError::Gateway {
                status,
                code: serde_json::from_slice::<BackendErrorBody>(&body)
                    .map(|b| b.error)
                    .unwrap_or_else(|_| "unknown".into()),
                message: String::from_utf8_lossy(&body).into_owned(),
            },
        });
    }
    if request.stream {
        read_stream(resp, &request.model, on_delta).await
    } else {
        let body = resp.bytes().await.map_err(EdgeError::Transport)?;
        let response: InvocationResponse = serde_json::from_slice(&body)
            .map_err(|e| EdgeError::Protocol(format!("response body: {e}")))?;
        on_delta(response.content());
        Ok(response)
    }
}

async fn read_stream(
    mut resp: HttpResponse,
    model: &str,
    on_delta: &mut (dyn FnMut(&str) + Send),
) -> Result<InvocationResponse, EdgeError> {
    let mut buf = Vec::new();
    let mut content = String::new();
    let mut chunks = 0u32;
    while let Some(chunk) = resp.chunk().await {
        buf.extend_from_slice(&chunk.map_err(EdgeError::Transport)?);
        while let Some(pos) = buf.iter().position(|b| *b == b'\n') {
            let line: Vec<u8> = buf.drain(..=pos).collect();
            let line = &line[..line.len() - 1];
            if line.is_empty() {
                continue;
            }
            match serde_json::from_slice::<StreamLine>(line)
                .map_err(|e| EdgeError::Protocol(format!("stream line: {e}")))?
            {
                StreamLine::Delta { delta } => {
                    chunks += 1;
                    on_delta(&delta);
                    content.push_str(&delta);
                }
                StreamLine::Final {
                    usage,
                    finish_reason,
                    id,
                } => {
                    if usage.completion_tokens != chunks {
                        return Err(EdgeError::Protocol(format!(
                            "final usage reports {} tokens but {chunks} arrived",
                            usage.completion_tokens
                        )));
                    }
                    return Ok(InvocationResponse {
                        id,
                        model: model.to_owned(),
                        choices: vec![Choice { index: 0, content }],
                        usage,
                        finish_reason,
                    });
                }
            }
        }
    }
    Err(EdgeError::Protocol("stream ended without a final usage line".into()))
}
