use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CredentialError {
    #[error("user_id must be non-empty")]
    EmptyUserId,
    #[error("user_id must not contain whitespace or '.'")]
    InvalidUserId,
    #[error("secret_key is {0} bytes, at least 32 are required")]
    WeakKey(usize),
    #[error("secret_key is not valid base64")]
    SecretEncoding,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClaimsError {
    #[error("exp ({exp}) must be after iat ({iat})")]
    NonPositiveLifetime { iat: i64, exp: i64 },
    #[error("lifetime of {lifetime}s exceeds the maximum of {max}s")]
    LifetimeTooLong { lifetime: i64, max: i64 },
    #[error("max_tokens must be at least 1")]
    ZeroMaxTokens,
    #[error("model must be non-empty")]
    EmptyModel,
    #[error("api_key must be non-empty")]
    EmptyApiKey,
    #[error("jti must be non-empty")]
    EmptyJti,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SignError {
    #[error("invalid claims: {0}")]
    InvalidClaims(#[from] ClaimsError),
    #[error("api_key {api_key:?} does not match credential user_id {user_id:?}")]
    IssuerMismatch { api_key: String, user_id: String },
}

/// Verification failures. Each variant has a stable machine-readable code.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VerifyError {
    #[error("malformed token: {0}")]
    Malformed(String),
    #[error("algorithm {0:?} is not accepted")]
    AlgRejected(String),
    #[error("signature does not match")]
    BadSignature,
    #[error("token expired")]
    Expired,
    #[error("token not yet valid")]
    NotYetValid,
}

impl VerifyError {
    pub fn code(&self) -> &'static str {
        match self {
            VerifyError::Malformed(_) => "malformed",
            VerifyError::AlgRejected(_) => "alg_rejected",
            VerifyError::BadSignature => "bad_signature",
            VerifyError::Expired => "expired",
            VerifyError::NotYetValid => "not_yet_valid",
        }
    }
}
