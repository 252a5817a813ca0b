//! The provider's front door.
//!
//! Every invocation carries a bearer credential. Compact tokens go through
//! the full pipeline (issuer lookup, signature and validity window, single
//! use, then the embedded model and token budget); long-lived static keys,
//! which exist only to model the baseline deployments, skip straight to the
//! engine. A completion callback is sent to the token's `callback_url` after
//! the response has been handed to the client.

mod callback;
mod engine;
mod registry;
mod replay;
mod service;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use dynaseal_token::{
    parse_unverified, verify_token, Clock, Credential, DynasealClaims, UnixMillis,
    VerificationPolicy, VerifyError,
};
use http::StatusCode;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ConfigError;
use crate::net::HttpClient;
use crate::protocol::{ErrorCode, InvocationRequest};

pub use callback::{CallbackDispatcher, CallbackTicket, DeliveryOutcome, DeliveryRecord, RetryPolicy};
pub use engine::{EngineError, Generation, MockEngine, ModelSpec};
pub use registry::{KeyRegistry, ModelScope, RegistryEntry, StaticKey};
pub use replay::ReplayCache;
pub use service::router;

fn default_listen() -> String {
    "127.0.0.1:8081".into()
}

fn default_leeway() -> u64 {
    dynaseal_token::DEFAULT_CLOCK_LEEWAY_MS
}

fn default_true() -> bool {
    true
}

fn default_max_tokens() -> u32 {
    4096
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssuerConfig {
    pub user_id: String,
    /// Standard base64.
    pub secret_key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub models: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StaticKeyConfig {
    pub key: String,
    #[serde(default)]
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub models: Option<Vec<String>>,
}

/// Provider configuration file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    pub registry: Vec<IssuerConfig>,
    #[serde(default)]
    pub static_keys: Vec<StaticKeyConfig>,
    pub served_models: Vec<ModelSpec>,
    pub callback_secret: String,
    #[serde(default = "default_leeway")]
    pub clock_leeway_ms: u64,
    /// When false the model and max_tokens claims are not enforced.
    #[serde(default = "default_true")]
    pub enforce_constraints: bool,
    #[serde(default)]
    pub seed: u64,
    /// Generation cap for static-key requests that set no max_tokens.
    #[serde(default = "default_max_tokens")]
    pub default_max_tokens: u32,
    #[serde(default)]
    pub callback_retry: RetryPolicy,
    /// Artificial delay between streamed chunks.
    #[serde(default)]
    pub token_delay_ms: u64,
}

impl GatewayConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.registry.is_empty() && self.static_keys.is_empty() {
            return Err(ConfigError::Invalid("key registry is empty".into()));
        }
        if self.served_models.is_empty() {
            return Err(ConfigError::Invalid("no served models".into()));
        }
        if self.callback_secret.is_empty() {
            return Err(ConfigError::Invalid("callback_secret is empty".into()));
        }
        if self.clock_leeway_ms > dynaseal_token::MAX_CLOCK_LEEWAY_MS {
            return Err(ConfigError::Invalid(format!(
                "clock_leeway_ms must be at most {}",
                dynaseal_token::MAX_CLOCK_LEEWAY_MS
            )));
        }
        for m in &self.served_models {
            if m.name.is_empty() || m.min_tokens == 0 || m.min_tokens > m.max_tokens {
                return Err(ConfigError::Invalid(format!("bad model spec {:?}", m.name)));
            }
        }
        if self.default_max_tokens == 0 {
            return Err(ConfigError::Invalid("default_max_tokens must be positive".into()));
        }
        Ok(())
    }

    pub fn key_registry(&self) -> Result<KeyRegistry, ConfigError> {
        let mut registry = KeyRegistry::new();
        for entry in &self.registry {
            let credential = Credential::from_base64(entry.user_id.clone(), &entry.secret_key)
                .map_err(|e| ConfigError::Invalid(format!("registry entry {:?}: {e}", entry.user_id)))?;
            registry.add_issuer(credential, ModelScope::from_option(entry.models.clone()));
        }
        for key in &self.static_keys {
            if key.key.is_empty() {
                return Err(ConfigError::Invalid("empty static key".into()));
            }
            registry.add_static_key(
                key.key.clone(),
                key.label.clone(),
                ModelScope::from_option(key.models.clone()),
            );
        }
        Ok(registry)
    }
}

/// What a successful authorization grants.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Grant {
    Token(DynasealClaims),
    StaticKey { label: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Authorization {
    pub grant: Grant,
    /// Generation cap after combining the credential and the request.
    pub effective_max: u32,
}

impl Authorization {
    pub fn claims(&self) -> Option<&DynasealClaims> {
        match &self.grant {
            Grant::Token(c) => Some(c),
            Grant::StaticKey { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AuthorizeError {
    #[error("no bearer credential presented")]
    MissingCredential,
    #[error("unknown issuer")]
    UnknownIssuer,
    #[error(transparent)]
    Token(#[from] VerifyError),
    #[error("token already used")]
    ReplayDetected,
    #[error("request model {requested:?} differs from granted model {granted:?}")]
    ModelMismatch { requested: String, granted: String },
    #[error("requested max_tokens {requested} exceeds granted {granted}")]
    TokenBudgetExceeded { requested: u32, granted: u32 },
    #[error("model {0:?} is not available to this credential")]
    ModelNotPermitted(String),
}

impl AuthorizeError {
    /// Precise code, used in logs.
    pub fn code(&self) -> ErrorCode {
        match self {
            AuthorizeError::MissingCredential => ErrorCode::Malformed,
            AuthorizeError::UnknownIssuer => ErrorCode::UnknownIssuer,
            AuthorizeError::Token(e) => match e {
                VerifyError::Malformed(_) => ErrorCode::Malformed,
                VerifyError::AlgRejected(_) => ErrorCode::AlgRejected,
                VerifyError::BadSignature => ErrorCode::BadSignature,
                VerifyError::Expired => ErrorCode::Expired,
                VerifyError::NotYetValid => ErrorCode::NotYetValid,
            },
            AuthorizeError::ReplayDetected => ErrorCode::ReplayDetected,
            AuthorizeError::ModelMismatch { .. } => ErrorCode::ModelMismatch,
            AuthorizeError::TokenBudgetExceeded { .. } => ErrorCode::TokenBudgetExceeded,
            AuthorizeError::ModelNotPermitted(_) => ErrorCode::UnknownModel,
        }
    }

    /// Code sent to the client. An unknown issuer is indistinguishable from a
    /// bad signature so user ids cannot be enumerated.
    pub fn wire_code(&self) -> ErrorCode {
        match self.code() {
            ErrorCode::UnknownIssuer => ErrorCode::BadSignature,
            code => code,
        }
    }

    pub fn status(&self) -> StatusCode {
        match self.code() {
            ErrorCode::ModelMismatch | ErrorCode::TokenBudgetExceeded => StatusCode::FORBIDDEN,
            ErrorCode::UnknownModel => StatusCode::NOT_FOUND,
            _ => StatusCode::UNAUTHORIZED,
        }
    }

    fn wire_message(&self) -> String {
        match self {
            AuthorizeError::UnknownIssuer => VerifyError::BadSignature.to_string(),
            other => other.to_string(),
        }
    }
}

#[derive(Debug, Default)]
pub struct GatewayStats {
    generate_calls: AtomicU64,
    responses: AtomicU64,
    budget_violations: AtomicU64,
    rejections: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct GatewayStatsSnapshot {
    pub generate_calls: u64,
    pub responses: u64,
    /// Token-granted responses whose completion exceeded the claimed budget.
    pub budget_violations: u64,
    pub rejections: u64,
}

pub struct Gateway {
    config: GatewayConfig,
    registry: KeyRegistry,
    replay: ReplayCache,
    engine: MockEngine,
    clock: Arc<dyn Clock>,
    callbacks: Arc<CallbackDispatcher>,
    stats: GatewayStats,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("issuers", &self.registry.issuer_count())
            .field("static_keys", &self.registry.static_key_count())
            .field("enforce_constraints", &self.config.enforce_constraints)
            .finish()
    }
}

impl Gateway {
    pub fn new(
        config: GatewayConfig,
        clock: Arc<dyn Clock>,
        callback_client: HttpClient,
    ) -> Result<Self, ConfigError> {
        config.validate()?;
        let registry = config.key_registry()?;
        let engine = MockEngine::new(config.served_models.iter().cloned(), config.seed);
        let callbacks = Arc::new(CallbackDispatcher::new(
            callback_client,
            config.callback_secret.clone(),
            config.callback_retry,
        ));
        Ok(Gateway {
            config,
            registry,
            replay: ReplayCache::new(),
            engine,
            clock,
            callbacks,
            stats: GatewayStats::default(),
        })
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn now(&self) -> UnixMillis {
        self.clock.now()
    }

    pub fn replay_cache(&self) -> &ReplayCache {
        &self.replay
    }

    pub fn callbacks(&self) -> &Arc<CallbackDispatcher> {
        &self.callbacks
    }

    pub fn engine(&self) -> &MockEngine {
        &self.engine
    }

    pub fn stats(&self) -> GatewayStatsSnapshot {
        GatewayStatsSnapshot {
            generate_calls: self.stats.generate_calls.load(Ordering::SeqCst),
            responses: self.stats.responses.load(Ordering::SeqCst),
            budget_violations: self.stats.budget_violations.load(Ordering::SeqCst),
            rejections: self.stats.rejections.load(Ordering::SeqCst),
        }
    }

    pub fn authorize(&self, bearer: &str, request: &InvocationRequest) -> Result<Authorization, AuthorizeError> {
        self.authorize_at(bearer, request, self.clock.now())
    }

    /// Runs the checks in a fixed order. The replay insert happens only once
    /// the signature and validity window have been accepted, so forged ids
    /// can never occupy the cache.
    pub fn authorize_at(
        &self,
        bearer: &str,
        request: &InvocationRequest,
        now: UnixMillis,
    ) -> Result<Authorization, AuthorizeError> {
        let result = self.check(bearer, request, now);
        if let Err(e) = &result {
            self.stats.rejections.fetch_add(1, Ordering::SeqCst);
            tracing::info!(code = %e.code(), error = %e, "invocation rejected");
        }
        result
    }

    fn check(
        &self,
        bearer: &str,
        request: &InvocationRequest,
        now: UnixMillis,
    ) -> Result<Authorization, AuthorizeError> {
        if bearer.is_empty() {
            return Err(AuthorizeError::MissingCredential);
        }
        if let Some(key) = self.registry.static_key(bearer) {
            if !key.scope.permits(&request.model) {
                return Err(AuthorizeError::ModelNotPermitted(request.model.clone()));
            }
            return Ok(Authorization {
                grant: Grant::StaticKey {
                    label: key.label.clone(),
                },
                effective_max: request.max_tokens.unwrap_or(self.config.default_max_tokens),
            });
        }

        let (_, unverified) = parse_unverified(bearer)?;
        let entry = self
            .registry
            .issuer(&unverified.api_key)
            .ok_or(AuthorizeError::UnknownIssuer)?;
        let policy = VerificationPolicy::new(
            FixedClock(now),
            Duration::from_millis(self.config.clock_leeway_ms),
        );
        let claims = verify_token(bearer, &entry.credential, &policy)?;

        let horizon = UnixMillis(claims.exp.saturating_mul(1000))
            .saturating_add(Duration::from_millis(self.config.clock_leeway_ms));
        if !self.replay.insert_if_absent(&claims.jti, horizon, now) {
            return Err(AuthorizeError::ReplayDetected);
        }

        let effective_max = if self.config.enforce_constraints {
            if request.model != claims.model {
                return Err(AuthorizeError::ModelMismatch {
                    requested: request.model.clone(),
                    granted: claims.model.clone(),
                });
            }
            match request.max_tokens {
                Some(requested) if requested > claims.max_tokens => {
                    return Err(AuthorizeError::TokenBudgetExceeded {
                        requested,
                        granted: claims.max_tokens,
                    })
                }
                Some(requested) => requested,
                None => claims.max_tokens,
            }
        } else {
            request.max_tokens.unwrap_or(self.config.default_max_tokens)
        };
        if !entry.scope.permits(&request.model) {
            return Err(AuthorizeError::ModelNotPermitted(request.model.clone()));
        }

        Ok(Authorization {
            grant: Grant::Token(claims),
            effective_max,
        })
    }

    /// Runs the engine for an authorized request.
    pub fn generate(&self, auth: &Authorization, request: &InvocationRequest) -> Result<Generation, EngineError> {
        self.stats.generate_calls.fetch_add(1, Ordering::SeqCst);
        self.engine
            .generate(&request.model, &request.messages, auth.effective_max)
    }

    fn record_response(&self, auth: &Authorization, completion_tokens: u32) {
        self.stats.responses.fetch_add(1, Ordering::SeqCst);
        if let Some(claims) = auth.claims() {
            if completion_tokens > claims.max_tokens {
                self.stats.budget_violations.fetch_add(1, Ordering::SeqCst);
            }
        }
    }
}

/// A clock pinned to one instant, so a request is judged against a single `now`.
#[derive(Debug, Clone, Copy)]
struct FixedClock(UnixMillis);

impl Clock for FixedClock {
    fn now(&self) -> UnixMillis {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::ChatMessage;
    use base64::Engine as _;
    use dynaseal_token::{sign_token, ManualClock};

    const START: i64 = 1_700_000_000;

    fn secret() -> Vec<u8> {
        b"provider-issued-secret-key-0123456789".to_vec()
    }

    fn config() -> GatewayConfig {
        GatewayConfig {
            listen: default_listen(),
            registry: vec![IssuerConfig {
                user_id: "u1".into(),
                secret_key: base64::engine::general_purpose::STANDARD.encode(secret()),
                models: None,
            }],
            static_keys: vec![StaticKeyConfig {
                key: "sk-static".into(),
                label: "embedded".into(),
                models: Some(vec!["m-small".into()]),
            }],
            served_models: vec![ModelSpec::new("m-small", 4, 24), ModelSpec::new("m-large", 4, 24)],
            callback_secret: "cb".into(),
            clock_leeway_ms: 500,
            enforce_constraints: true,
            seed: 1,
            default_max_tokens: 4096,
            callback_retry: RetryPolicy::default(),
            token_delay_ms: 0,
        }
    }

    fn gateway(config: GatewayConfig) -> Gateway {
        let clock = ManualClock::new(UnixMillis::from_secs(START));
        Gateway::new(config, Arc::new(clock), HttpClient::default()).unwrap()
    }

    fn token(jti: &str, model: &str, max_tokens: u32) -> String {
        let claims = DynasealClaims {
            api_key: "u1".into(),
            model: model.into(),
            max_tokens,
            iat: START,
            exp: START + 1,
            jti: jti.into(),
            callback_url: "http://127.0.0.1:1/v1/callback".into(),
            device_id: None,
        };
        sign_token(&claims, &Credential::new("u1", secret()).unwrap())
            .unwrap()
            .compact
    }

    fn request(model: &str, max_tokens: Option<u32>) -> InvocationRequest {
        InvocationRequest {
            model: model.into(),
            messages: vec![ChatMessage::user("hello there")],
            max_tokens,
            stream: false,
        }
    }

    fn now() -> UnixMillis {
        UnixMillis::from_secs(START)
    }

    #[test]
    fn valid_token_once_then_replay() {
        let gw = gateway(config());
        let t = token("j1", "m-small", 64);
        let auth = gw.authorize_at(&t, &request("m-small", None), now()).unwrap();
        assert_eq!(auth.effective_max, 64);
        assert_eq!(
            gw.authorize_at(&t, &request("m-small", None), now()),
            Err(AuthorizeError::ReplayDetected)
        );
    }

    #[test]
    fn model_mismatch_and_budget() {
        let gw = gateway(config());
        let err = gw
            .authorize_at(&token("j1", "m-small", 64), &request("m-large", None), now())
            .unwrap_err();
        assert_eq!(err.code(), ErrorCode::ModelMismatch);
        assert_eq!(err.status(), StatusCode::FORBIDDEN);

        let err = gw
            .authorize_at(&token("j2", "m-small", 64), &request("m-small", Some(65)), now())
            .unwrap_err();
        assert_eq!(err.code(), ErrorCode::TokenBudgetExceeded);

        let auth = gw
            .authorize_at(&token("j3", "m-small", 64), &request("m-small", Some(10)), now())
            .unwrap();
        assert_eq!(auth.effective_max, 10);
    }

    #[test]
    fn edited_budget_breaks_signature() {
        let gw = gateway(config());
        let t = token("j1", "m-small", 64);
        let mut parts: Vec<String> = t.split('.').map(str::to_owned).collect();
        let b64 = base64::engine::general_purpose::URL_SAFE_NO_PAD;
        let json = String::from_utf8(b64.decode(&parts[1]).unwrap()).unwrap();
        parts[1] = b64.encode(json.replace("\"max_tokens\":64", "\"max_tokens\":6400"));
        let forged = parts.join(".");
        let err = gw
            .authorize_at(&forged, &request("m-small", Some(6400)), now())
            .unwrap_err();
        assert_eq!(err.code(), ErrorCode::BadSignature);
        assert!(!gw.replay_cache().contains("j1"));
    }

    #[test]
    fn unknown_issuer_looks_like_bad_signature() {
        let gw = gateway(config());
        let claims = DynasealClaims {
            api_key: "u2".into(),
            model: "m-small".into(),
            max_tokens: 8,
            iat: START,
            exp: START + 1,
            jti: "j".into(),
            callback_url: "http://x/cb".into(),
            device_id: None,
        };
        let t = sign_token(&claims, &Credential::new("u2", [3u8; 32]).unwrap()).unwrap();
        let err = gw
            .authorize_at(&t.compact, &request("m-small", None), now())
            .unwrap_err();
        assert_eq!(err.code(), ErrorCode::UnknownIssuer);
        assert_eq!(err.wire_code(), ErrorCode::BadSignature);
        assert_eq!(err.status(), StatusCode::UNAUTHORIZED);
    }

    #[test]
    fn expiry_uses_leeway_and_skips_replay_cache() {
        let gw = gateway(config());
        let t = token("j1", "m-small", 8);
        let late = UnixMillis((START + 1) * 1000 + 500);
        assert_eq!(
            gw.authorize_at(&t, &request("m-small", None), late).unwrap_err().code(),
            ErrorCode::Expired
        );
        assert!(gw.replay_cache().is_empty());
        let just_in_time = UnixMillis((START + 1) * 1000 - 1);
        assert!(gw.authorize_at(&t, &request("m-small", None), just_in_time).is_ok());
    }

    #[test]
    fn relaxed_mode_ignores_claims_but_still_verifies() {
        let mut cfg = config();
        cfg.enforce_constraints = false;
        let gw = gateway(cfg);
        let auth = gw
            .authorize_at(&token("j1", "m-small", 8), &request("m-large", Some(100)), now())
            .unwrap();
        assert_eq!(auth.effective_max, 100);
        let mut bad = token("j2", "m-small", 8);
        bad.push('A');
        assert!(gw.authorize_at(&bad, &request("m-small", None), now()).is_err());
    }

    #[test]
    fn static_keys_respect_scope_only() {
        let gw = gateway(config());
        let auth = gw
            .authorize_at("sk-static", &request("m-small", Some(9999)), now())
            .unwrap();
        assert_eq!(auth.effective_max, 9999);
        assert!(matches!(auth.grant, Grant::StaticKey { .. }));
        // Static keys are not single use.
        assert!(gw.authorize_at("sk-static", &request("m-small", None), now()).is_ok());
        assert_eq!(
            gw.authorize_at("sk-static", &request("m-large", None), now())
                .unwrap_err()
                .code(),
            ErrorCode::UnknownModel
        );
    }

    #[test]
    fn config_validation() {
        let mut cfg = config();
        cfg.registry.clear();
        cfg.static_keys.clear();
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(_))));

        let mut cfg = config();
        cfg.clock_leeway_ms = 2_001;
        assert!(cfg.validate().is_err());

        let missing_registry = r#"{"served_models":[],"callback_secret":"x"}"#;
        assert!(serde_json::from_str::<GatewayConfig>(missing_registry).is_err());
    }
}
