//! JSON shapes exchanged between edge devices, the backend and the provider.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Header carrying the shared secret on provider-to-backend callbacks.
pub const CALLBACK_AUTH_HEADER: &str = "X-Dynaseal-Callback-Auth";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvocationRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    #[serde(default)]
    pub stream: bool,
}

impl InvocationRequest {
    pub fn validate(&self) -> Result<(), String> {
        if self.messages.is_empty() {
            return Err("messages must not be empty".into());
        }
        if self.model.is_empty() {
            return Err("model must not be empty".into());
        }
        if self.max_tokens == Some(0) {
            return Err("max_tokens must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u32,
    pub completion_tokens: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Choice {
    pub index: u32,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvocationResponse {
    pub id: String,
    pub model: String,
    pub choices: Vec<Choice>,
    pub usage: Usage,
    pub finish_reason: FinishReason,
}

impl InvocationResponse {
    pub fn content(&self) -> &str {
        self.choices.first().map(|c| c.content.as_str()).unwrap_or("")
    }
}

/// One line of a streamed response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StreamLine {
    Delta {
        delta: String,
    },
    Final {
        usage: Usage,
        finish_reason: FinishReason,
        id: String,
    },
}

/// Machine-readable gateway error codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    UnknownIssuer,
    BadSignature,
    Expired,
    NotYetValid,
    Malformed,
    AlgRejected,
    ReplayDetected,
    ModelMismatch,
    TokenBudgetExceeded,
    UnknownModel,
    InvalidRequest,
    EngineFailure,
}

impl ErrorCode {
    pub const ALL: [ErrorCode; 12] = [
        ErrorCode::UnknownIssuer,
        ErrorCode::BadSignature,
        ErrorCode::Expired,
        ErrorCode::NotYetValid,
        ErrorCode::Malformed,
        ErrorCode::AlgRejected,
        ErrorCode::ReplayDetected,
        ErrorCode::ModelMismatch,
        ErrorCode::TokenBudgetExceeded,
        ErrorCode::UnknownModel,
        ErrorCode::InvalidRequest,
        ErrorCode::EngineFailure,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::UnknownIssuer => "unknown_issuer",
            ErrorCode::BadSignature => "bad_signature",
            ErrorCode::Expired => "expired",
            ErrorCode::NotYetValid => "not_yet_valid",
            ErrorCode::Malformed => "malformed",
            ErrorCode::AlgRejected => "alg_rejected",
            ErrorCode::ReplayDetected => "replay_detected",
            ErrorCode::ModelMismatch => "model_mismatch",
            ErrorCode::TokenBudgetExceeded => "token_budget_exceeded",
            ErrorCode::UnknownModel => "unknown_model",
            ErrorCode::InvalidRequest => "invalid_request",
            ErrorCode::EngineFailure => "engine_failure",
        }
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ErrorCode {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        ErrorCode::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub code: String,
    pub message: String,
}

/// Gateway error body: `{"error":{"code":..,"message":..}}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

/// Backend error body: `{"error":"model_not_allowed"}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendErrorBody {
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRequest {
    pub device_id: String,
    pub model: String,
    pub max_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenResponse {
    pub token: String,
    pub expires_at: i64,
}

/// Provider-to-backend report sent once a generation finishes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallbackNotification {
    pub jti: String,
    pub model: String,
    pub usage: Usage,
    pub finish_reason: FinishReason,
    pub response_content: String,
    pub completed_at: i64,
}
