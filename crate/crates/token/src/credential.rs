use std::fmt;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::CredentialError;

pub const MIN_SECRET_LEN: usize = 32;

/// The user-id / secret-key pair a provider hands to a backend.
///
/// The secret is serialized as standard base64 so it can live in JSON config.
#[derive(Clone, PartialEq, Eq)]
pub struct Credential {
    user_id: String,
    secret_key: Vec<u8>,
}

impl Credential {
    pub fn new(user_id: impl Into<String>, secret_key: impl Into<Vec<u8>>) -> Result<Self, CredentialError> {
        let user_id = user_id.into();
        let secret_key = secret_key.into();
        validate_user_id(&user_id)?;
        if secret_key.len() < MIN_SECRET_LEN {
            return Err(CredentialError::WeakKey(secret_key.len()));
        }
        Ok(Credential { user_id, secret_key })
    }

    pub fn from_base64(user_id: impl Into<String>, secret_b64: &str) -> Result<Self, CredentialError> {
        let secret = STANDARD
            .decode(secret_b64.trim())
            .map_err(|_| CredentialError::SecretEncoding)?;
        Credential::new(user_id, secret)
    }

    pub fn user_id(&self) -> &str {
        &self.user_id
    }

    pub fn secret_key(&self) -> &[u8] {
        &self.secret_key
    }

    pub fn secret_base64(&self) -> String {
        STANDARD.encode(&self.secret_key)
    }
}

pub(crate) fn validate_user_id(user_id: &str) -> Result<(), CredentialError> {
    if user_id.is_empty() {
        return Err(CredentialError::EmptyUserId);
    }
    if user_id.chars().any(|c| c.is_whitespace() || c == '.') {
        return Err(CredentialError::InvalidUserId);
    }
    Ok(())
}

impl fmt::Debug for Credential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Credential")
            .field("user_id", &self.user_id)
            .field("secret_key", &"<redacted>")
            .finish()
    }
}

#[derive(Serialize, Deserialize)]
struct CredentialRepr {
    user_id: String,
    secret_key: String,
}

impl Serialize for Credential {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        CredentialRepr {
            user_id: self.user_id.clone(),
            secret_key: self.secret_base64(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Credential {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let repr = CredentialRepr::deserialize(deserializer)?;
        Credential::from_base64(repr.user_id, &repr.secret_key).map_err(serde::de::Error::custom)
    }
}
