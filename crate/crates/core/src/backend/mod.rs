//! The application backend: holds the provider credential, mints tokens for
//! its devices, receives completion callbacks and can act as a plain relay
//! for the relay baseline.

mod ledger;
mod service;

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use dynaseal_token::{
    sign_token_with_max_ttl, Clock, Credential, DynasealClaims, UnixMillis, DEFAULT_MAX_TTL_SECS,
};
use http::StatusCode;
use serde::{Deserialize, Serialize};
use subtle::ConstantTimeEq;
use thiserror::Error;

use crate::config::ConfigError;
use crate::net::HttpClient;
use crate::protocol::{CallbackNotification, TokenResponse};

pub use ledger::{
    response_digest, CompletionOutcome, Ledger, LedgerEntry, LedgerError, LedgerState, StateCounts,
};
pub use service::router;

fn default_listen() -> String {
    "127.0.0.1:8080".into()
}

fn default_ttl_ms() -> u64 {
    1_000
}

fn default_max_ttl() -> i64 {
    DEFAULT_MAX_TTL_SECS
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceConfig {
    /// Bearer secret the device presents when asking for tokens.
    pub secret: String,
    #[serde(default = "default_class")]
    pub class: String,
}

fn default_class() -> String {
    "default".into()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssuePolicy {
    /// Device class to the models it may request.
    pub allowed_models: BTreeMap<String, Vec<String>>,
    pub max_tokens_ceiling: u32,
    #[serde(default = "default_ttl_ms")]
    pub token_ttl_ms: u64,
    /// Tokens per device per minute; 0 disables the limit.
    #[serde(default)]
    pub per_device_rate: u32,
    #[serde(default = "default_max_ttl")]
    pub max_ttl_secs: i64,
}

impl IssuePolicy {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_tokens_ceiling == 0 {
            return Err(ConfigError::Invalid("max_tokens_ceiling must be at least 1".into()));
        }
        if self.max_ttl_secs < 1 {
            return Err(ConfigError::Invalid("max_ttl_secs must be at least 1".into()));
        }
        if self.token_ttl_ms == 0 || self.token_ttl_ms > self.max_ttl_secs as u64 * 1000 {
            return Err(ConfigError::Invalid(format!(
                "token_ttl_ms must be in 1..={}",
                self.max_ttl_secs * 1000
            )));
        }
        Ok(())
    }

    fn permits(&self, class: &str, model: &str) -> bool {
        self.allowed_models
            .get(class)
            .is_some_and(|models| models.iter().any(|m| m == model))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelayConfig {
    /// Base URL of the provider gateway.
    pub upstream_url: String,
    /// Static provider key used on every forwarded request.
    pub provider_key: String,
    /// Keys handed out to devices for the relay endpoint.
    #[serde(default)]
    pub keys: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    /// Without a credential the backend cannot issue tokens.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub credential: Option<Credential>,
    pub callback_secret: String,
    /// Base URL the provider uses for callbacks. Defaults to the bound address.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub public_url: Option<String>,
    #[serde(default)]
    pub devices: BTreeMap<String, DeviceConfig>,
    pub policy: IssuePolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ledger_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relay: Option<RelayConfig>,
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.policy.validate()?;
        if self.callback_secret.is_empty() {
            return Err(ConfigError::Invalid("callback_secret is empty".into()));
        }
        if self.credential.is_none() && self.relay.is_none() {
            return Err(ConfigError::Invalid(
                "backend needs a credential, a relay section, or both".into(),
            ));
        }
        for (id, device) in &self.devices {
            if device.secret.is_empty() {
                return Err(ConfigError::Invalid(format!("device {id:?} has an empty secret")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("model not allowed for this device")]
    ModelNotAllowed,
    #[error("issuance rate limit reached")]
    RateLimited,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("device not authorized")]
    UnauthorizedDevice,
    #[error("token issuance is not configured")]
    Disabled,
    #[error("bad callback authentication")]
    BadCallbackAuth,
    #[error("signing failed: {0}")]
    Signing(String),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

impl BackendError {
    pub fn code(&self) -> &'static str {
        match self {
            BackendError::ModelNotAllowed => "model_not_allowed",
            BackendError::RateLimited => "rate_limited",
            BackendError::InvalidRequest(_) => "invalid_request",
            BackendError::UnauthorizedDevice => "unauthorized_device",
            BackendError::Disabled => "issuance_disabled",
            BackendError::BadCallbackAuth => "bad_callback_auth",
            BackendError::Signing(_) => "internal_error",
            BackendError::Ledger(e) => match e {
                LedgerError::UnknownJti(_) => "unknown_jti",
                LedgerError::StateConflict { .. } => "state_conflict",
                LedgerError::InvalidNotification(_) => "invalid_notification",
                _ => "internal_error",
            },
        }
    }

    pub fn status(&self) -> StatusCode {
        match self.code() {
            "model_not_allowed" => StatusCode::FORBIDDEN,
            "rate_limited" => StatusCode::TOO_MANY_REQUESTS,
            "invalid_request" => StatusCode::BAD_REQUEST,
            "unauthorized_device" | "bad_callback_auth" => StatusCode::UNAUTHORIZED,
            "issuance_disabled" => StatusCode::SERVICE_UNAVAILABLE,
            "unknown_jti" => StatusCode::NOT_FOUND,
            "state_conflict" => StatusCode::CONFLICT,
            "invalid_notification" => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

/// Fresh token id: a random (version 4) UUID.
pub fn new_jti() -> String {
    uuid::Uuid::new_v4().to_string()
}

fn ct_eq(a: &str, b: &str) -> bool {
    a.as_bytes().ct_eq(b.as_bytes()).into()
}

pub struct Backend {
    config: BackendConfig,
    clock: Arc<dyn Clock>,
    ledger: Ledger,
    public_url: RwLock<String>,
    issue_log: Mutex<HashMap<String, VecDeque<i64>>>,
    revoked_devices: RwLock<HashSet<String>>,
    revoked_relay_keys: RwLock<HashSet<String>>,
    relay_client: HttpClient,
}

impl std::fmt::Debug for Backend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backend")
            .field("public_url", &*self.public_url.read().unwrap())
            .field("devices", &self.config.devices.len())
            .field("ledger", &self.ledger.len())
            .finish()
    }
}

impl Backend {
    /// `relay_client` carries forwarded requests to the provider.
    pub fn new(config: BackendConfig, clock: Arc<dyn Clock>, relay_client: HttpClient) -> Result<Self, ConfigError> {
        config.validate()?;
        let ledger = match &config.ledger_path {
            Some(path) => Ledger::open(path).map_err(|e| ConfigError::Invalid(e.to_string()))?,
            None => Ledger::in_memory(),
        };
        let public_url = config.public_url.clone().unwrap_or_default();
        Ok(Backend {
            config,
            clock,
            ledger,
            public_url: RwLock::new(public_url),
            issue_log: Mutex::new(HashMap::new()),
            revoked_devices: RwLock::new(HashSet::new()),
            revoked_relay_keys: RwLock::new(HashSet::new()),
            relay_client,
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn now(&self) -> UnixMillis {
        self.clock.now()
    }

    /// Sets the callback base URL once the listen address is known, unless
    /// one was configured explicitly.
    pub fn set_default_public_url(&self, url: &str) {
        let mut current = self.public_url.write().unwrap();
        if current.is_empty() {
            *current = url.trim_end_matches('/').to_owned();
        }
    }

    pub fn callback_url(&self) -> String {
        format!("{}/v1/callback", self.public_url.read().unwrap())
    }

    pub fn revoke_device(&self, device_id: &str) {
        self.revoked_devices.write().unwrap().insert(device_id.to_owned());
    }

    pub fn revoke_relay_key(&self, key: &str) {
        self.revoked_relay_keys.write().unwrap().insert(key.to_owned());
    }

    /// Checks the bearer secret a device presented.
    pub fn authenticate_device(&self, device_id: &str, presented: &str) -> Result<(), BackendError> {
        let device = self
            .config
            .devices
            .get(device_id)
            .ok_or(BackendError::UnauthorizedDevice)?;
        if !ct_eq(&device.secret, presented) || self.revoked_devices.read().unwrap().contains(device_id) {
            return Err(BackendError::UnauthorizedDevice);
        }
        Ok(())
    }

    /// Mints a token for an authenticated device.
    pub fn issue_token(&self, device_id: &str, model: &str, max_tokens: u32) -> Result<TokenResponse, BackendError> {
        let credential = self.config.credential.as_ref().ok_or(BackendError::Disabled)?;
        let device = self
            .config
            .devices
            .get(device_id)
            .ok_or(BackendError::UnauthorizedDevice)?;
        if self.revoked_devices.read().unwrap().contains(device_id) {
            return Err(BackendError::UnauthorizedDevice);
        }
        if max_tokens < 1 {
            return Err(BackendError::InvalidRequest("max_tokens must be at least 1".into()));
        }
        let policy = &self.config.policy;
        if !policy.permits(&device.class, model) {
            return Err(BackendError::ModelNotAllowed);
        }
        let now = self.clock.now();
        self.take_rate_slot(device_id, now)?;

        let iat = now.as_secs();
        let exp = now
            .saturating_add(Duration::from_millis(policy.token_ttl_ms))
            .as_secs_ceil()
            .min(iat + policy.max_ttl_secs);
        let claims = DynasealClaims {
            api_key: credential.user_id().to_owned(),
            model: model.to_owned(),
            max_tokens: max_tokens.min(policy.max_tokens_ceiling),
            iat,
            exp,
            jti: new_jti(),
            callback_url: self.callback_url(),
            device_id: Some(device_id.to_owned()),
        };
        let signed = sign_token_with_max_ttl(&claims, credential, policy.max_ttl_secs)
            .map_err(|e| BackendError::Signing(e.to_string()))?;
        self.ledger
            .record_issued(&claims.jti, device_id, model, claims.max_tokens, now, exp)?;
        tracing::debug!(jti = %claims.jti, device_id, model, max_tokens = claims.max_tokens, "token issued");
        Ok(TokenResponse {
            token: signed.compact,
            expires_at: exp,
        })
    }

    fn take_rate_slot(&self, device_id: &str, now: UnixMillis) -> Result<(), BackendError> {
        let limit = self.config.policy.per_device_rate;
        if limit == 0 {
            return Ok(());
        }
        let mut log = self.issue_log.lock().unwrap();
        let window = log.entry(device_id.to_owned()).or_default();
        while window.front().is_some_and(|t| *t <= now.0 - 60_000) {
            window.pop_front();
        }
        if window.len() >= limit as usize {
            return Err(BackendError::RateLimited);
        }
        window.push_back(now.0);
        Ok(())
    }

    pub fn handle_callback(
        &self,
        notification: &CallbackNotification,
        presented_auth: &str,
    ) -> Result<CompletionOutcome, BackendError> {
        if !ct_eq(&self.config.callback_secret, presented_auth) {
            return Err(BackendError::BadCallbackAuth);
        }
        let outcome = self.ledger.complete(notification)?;
        tracing::debug!(jti = %notification.jti, ?outcome, "callback handled");
        Ok(outcome)
    }

    /// Expires entries whose token died more than one TTL ago.
    pub fn sweep_expired(&self) -> Result<usize, BackendError> {
        self.sweep_expired_at(self.clock.now())
    }

    pub fn sweep_expired_at(&self, now: UnixMillis) -> Result<usize, BackendError> {
        Ok(self
            .ledger
            .sweep_expired(now, self.config.policy.token_ttl_ms as i64)?)
    }

    fn relay_key_valid(&self, presented: &str) -> bool {
        let Some(relay) = &self.config.relay else {
            return false;
        };
        let known = relay.keys.iter().fold(false, |acc, k| acc | ct_eq(k, presented));
        known && !self.revoked_relay_keys.read().unwrap().contains(presented)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dynaseal_token::{parse_unverified, ManualClock};

    const START_MS: i64 = 1_700_000_000_300;

    fn config() -> BackendConfig {
        BackendConfig {
            listen: default_listen(),
            credential: Some(Credential::new("u1", [7u8; 32]).unwrap()),
            callback_secret: "cb-secret".into(),
            public_url: Some("http://backend".into()),
            devices: BTreeMap::from([(
                "dev1".to_owned(),
                DeviceConfig {
                    secret: "dev1-secret".into(),
                    class: "default".into(),
                },
            )]),
            policy: IssuePolicy {
                allowed_models: BTreeMap::from([("default".to_owned(), vec!["m-small".to_owned()])]),
                max_tokens_ceiling: 128,
                token_ttl_ms: 1_000,
                per_device_rate: 0,
                max_ttl_secs: 5,
            },
            ledger_path: None,
            relay: None,
        }
    }

    fn backend(config: BackendConfig) -> (Backend, ManualClock) {
        let clock = ManualClock::new(UnixMillis(START_MS));
        let b = Backend::new(config, Arc::new(clock.clone()), HttpClient::default()).unwrap();
        (b, clock)
    }

    #[test]
    fn issue_under_and_over_ceiling() {
        let (b, _) = backend(config());
        let t = b.issue_token("dev1", "m-small", 64).unwrap();
        let (_, claims) = parse_unverified(&t.token).unwrap();
        assert_eq!(claims.max_tokens, 64);
        assert_eq!(claims.callback_url, "http://backend/v1/callback");
        assert_eq!(claims.iat, 1_700_000_000);
        assert_eq!(claims.exp, 1_700_000_002);
        assert_eq!(t.expires_at, claims.exp);
        assert_eq!(b.ledger().get(&claims.jti).unwrap().state, LedgerState::Issued);

        let t = b.issue_token("dev1", "m-small", 10_000).unwrap();
        assert_eq!(parse_unverified(&t.token).unwrap().1.max_tokens, 128);
    }

    #[test]
    fn refusals() {
        let (b, _) = backend(config());
        assert!(matches!(b.issue_token("dev1", "m-forbidden", 64), Err(BackendError::ModelNotAllowed)));
        assert!(matches!(b.issue_token("dev1", "m-small", 0), Err(BackendError::InvalidRequest(_))));
        assert!(matches!(b.issue_token("nobody", "m-small", 1), Err(BackendError::UnauthorizedDevice)));
        b.revoke_device("dev1");
        assert!(matches!(b.issue_token("dev1", "m-small", 1), Err(BackendError::UnauthorizedDevice)));
        assert!(b.ledger().is_empty());
        assert_eq!(BackendError::ModelNotAllowed.status(), StatusCode::FORBIDDEN);
    }

    #[test]
    fn device_authentication() {
        let (b, _) = backend(config());
        assert!(b.authenticate_device("dev1", "dev1-secret").is_ok());
        assert!(b.authenticate_device("dev1", "dev1-secreT").is_err());
        assert!(b.authenticate_device("dev2", "dev1-secret").is_err());
    }

    #[test]
    fn rate_limit_uses_a_sliding_minute() {
        let mut cfg = config();
        cfg.policy.per_device_rate = 2;
        let (b, clock) = backend(cfg);
        b.issue_token("dev1", "m-small", 1).unwrap();
        b.issue_token("dev1", "m-small", 1).unwrap();
        assert!(matches!(b.issue_token("dev1", "m-small", 1), Err(BackendError::RateLimited)));
        clock.advance(Duration::from_secs(60));
        assert!(b.issue_token("dev1", "m-small", 1).is_ok());
    }

    #[test]
    fn lifetime_never_exceeds_max_ttl() {
        let mut cfg = config();
        cfg.policy.token_ttl_ms = 5_000;
        let (b, _) = backend(cfg);
        let (_, claims) = parse_unverified(&b.issue_token("dev1", "m-small", 1).unwrap().token).unwrap();
        assert_eq!(claims.exp - claims.iat, 5);
    }

    #[test]
    fn callback_auth_and_sweep() {
        let (b, clock) = backend(config());
        let t = b.issue_token("dev1", "m-small", 8).unwrap();
        let (_, claims) = parse_unverified(&t.token).unwrap();
        let n = CallbackNotification {
            jti: claims.jti.clone(),
            model: "m-small".into(),
            usage: Default::default(),
            finish_reason: crate::protocol::FinishReason::Stop,
            response_content: String::new(),
            completed_at: 0,
        };
        assert!(matches!(b.handle_callback(&n, "wrong"), Err(BackendError::BadCallbackAuth)));
        b.issue_token("dev1", "m-small", 8).unwrap();
        assert_eq!(b.handle_callback(&n, "cb-secret").unwrap(), CompletionOutcome::Completed);
        clock.set(UnixMillis(claims.exp * 1000 + 1_000));
        assert_eq!(b.sweep_expired().unwrap(), 0);
        clock.advance(Duration::from_millis(1));
        assert_eq!(b.sweep_expired().unwrap(), 1);
        let counts = b.ledger().counts();
        assert_eq!((counts.completed, counts.expired), (1, 1));
    }

    #[test]
    fn config_needs_a_purpose() {
        let mut cfg = config();
        cfg.credential = None;
        assert!(cfg.validate().is_err());
        let mut cfg = config();
        cfg.policy.token_ttl_ms = 6_000;
        assert!(cfg.validate().is_err());
    }
}
