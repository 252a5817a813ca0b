use serde::{Deserialize, Serialize};

use crate::error::ClaimsError;

/// Upper bound on `exp - iat` accepted at signing time.
pub const DEFAULT_MAX_TTL_SECS: i64 = 5;

/// Token payload. Field order here is the canonical serialization order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DynasealClaims {
    /// The issuing backend's user_id.
    pub api_key: String,
    pub model: String,
    pub max_tokens: u32,
    pub iat: i64,
    pub exp: i64,
    pub jti: String,
    pub callback_url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device_id: Option<String>,
}

impl DynasealClaims {
    pub fn validate(&self, max_ttl_secs: i64) -> Result<(), ClaimsError> {
        if self.api_key.is_empty() {
            return Err(ClaimsError::EmptyApiKey);
        }
        if self.model.is_empty() {
            return Err(ClaimsError::EmptyModel);
        }
        if self.max_tokens == 0 {
            return Err(ClaimsError::ZeroMaxTokens);
        }
        if self.jti.is_empty() {
            return Err(ClaimsError::EmptyJti);
        }
        if self.exp <= self.iat {
            return Err(ClaimsError::NonPositiveLifetime {
                iat: self.iat,
                exp: self.exp,
            });
        }
        let lifetime = self.exp - self.iat;
        if lifetime > max_ttl_secs {
            return Err(ClaimsError::LifetimeTooLong {
                lifetime,
                max: max_ttl_secs,
            });
        }
        Ok(())
    }

    /// Canonical JSON: fixed key order, no insignificant whitespace.
    pub fn canonical_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("claims serialize infallibly")
    }
}
