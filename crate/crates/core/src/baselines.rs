//! The two incumbent deployments, behind one client type shared with the
//! token flow:
//!
//! * embedded: the device ships a long-lived provider key and calls the
//!   provider directly;
//! * relay: the device holds a key issued by the backend, which forwards
//!   every request to the provider under its own provider key.

use serde::{Deserialize, Serialize};

use crate::edge::{invoke, invoke_path, EdgeClient, EdgeError};
use crate::net::HttpClient;
use crate::protocol::{InvocationRequest, InvocationResponse};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Embedded,
    Relay,
    Dynaseal,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Embedded, Method::Relay, Method::Dynaseal];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Embedded => "embedded",
            Method::Relay => "relay",
            Method::Dynaseal => "dynaseal",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown method {s:?} (expected embedded, relay or dynaseal)"))
    }
}

/// What an embedded-key device carries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddedKeyConfig {
    pub gateway_url: String,
    pub api_key: String,
}

/// What a relay device carries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelayClientConfig {
    pub backend_url: String,
    pub relay_key: String,
}

pub const RELAY_PATH: &str = "/v1/relay/chat/completions";

#[derive(Debug, Clone)]
pub enum ModeClient {
    Embedded { config: EmbeddedKeyConfig, http: HttpClient },
    Relay { config: RelayClientConfig, http: HttpClient },
    Dynaseal(EdgeClient),
}

impl ModeClient {
    pub fn method(&self) -> Method {
        match self {
            ModeClient::Embedded { .. } => Method::Embedded,
            ModeClient::Relay { .. } => Method::Relay,
            ModeClient::Dynaseal(_) => Method::Dynaseal,
        }
    }

    /// The credential the device presents for one call with the given intent.
    pub async fn credential(&self, model: &str, max_tokens: u32) -> Result<String, EdgeError> {
        match self {
            ModeClient::Embedded { config, .. } => Ok(config.api_key.clone()),
            ModeClient::Relay { config, .. } => Ok(config.relay_key.clone()),
            ModeClient::Dynaseal(edge) => Ok(edge.acquire_token(model, max_tokens).await?.token),
        }
    }

    /// Sends one request with an explicit credential along this mode's path.
    pub async fn invoke_with(
        &self,
        credential: &str,
        request: &InvocationRequest,
    ) -> Result<InvocationResponse, EdgeError> {
        let mut ignore = |_: &str| {};
        match self {
            ModeClient::Embedded { config, http } => {
                invoke(http, &config.gateway_url, credential, request, &mut ignore).await
            }
            ModeClient::Relay { config, http } => {
                invoke_path(http, &config.backend_url, RELAY_PATH, credential, request, &mut ignore).await
            }
            ModeClient::Dynaseal(edge) => {
                let http = edge.http();
                invoke(http, &edge.config().gateway_url, credential, request, &mut ignore).await
            }
        }
    }

    /// A complete call as an application would make it.
    pub async fn chat(&self, request: &InvocationRequest, max_tokens: u32) -> Result<InvocationResponse, EdgeError> {
        match self {
            ModeClient::Dynaseal(edge) => {
                let model = Some(request.model.as_str());
                let messages = request.messages.clone();
                let out = if request.stream {
                    edge.chat_stream(messages, model, max_tokens, &mut |_| {}).await?
                } else {
                    edge.chat(messages, model, max_tokens).await?
                };
                Ok(out.response)
            }
            other => {
                let credential = other.credential(&request.model, max_tokens).await?;
                other.invoke_with(&credential, request).await
            }
        }
    }

    /// Everything that has to be provisioned on the device, as JSON.
    pub fn device_config(&self) -> serde_json::Value {
        match self {
            ModeClient::Embedded { config, .. } => serde_json::to_value(config),
            ModeClient::Relay { config, .. } => serde_json::to_value(config),
            ModeClient::Dynaseal(edge) => serde_json::to_value(edge.config()),
        }
        .expect("device configs serialize")
    }
}

/// True if any provider secret appears anywhere in the device's configuration.
pub fn holds_provider_secret(device_config: &serde_json::Value, provider_secrets: &[String]) -> bool {
    let text = device_config.to_string();
    provider_secrets
        .iter()
        .filter(|s| !s.is_empty())
        .any(|s| text.contains(s.as_str()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
        }
        assert!("oneapi".parse::<Method>().is_err());
    }

    #[test]
    fn secret_search_looks_at_every_field() {
        let cfg = serde_json::json!({"gateway_url": "http://x", "api_key": "sk-123"});
        assert!(holds_provider_secret(&cfg, &["sk-123".into()]));
        assert!(!holds_provider_secret(&cfg, &["sk-999".into(), String::new()]));
    }
}
