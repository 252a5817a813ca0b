//! In-process deployment of the backend and the provider gateway on loopback
//! ports, used by the scenario harness, the traffic bench, the CLI and tests.

use std::collections::BTreeMap;
use std::io;
use std::sync::Arc;
use std::time::Duration;

use dynaseal_token::{Clock, Credential};
use rand::RngCore;

use crate::backend::{self, Backend, BackendConfig, DeviceConfig, IssuePolicy};
use crate::config::ConfigError;
use crate::edge::{EdgeClient, EdgeConfig};
use crate::gateway::{self, Gateway, GatewayConfig, IssuerConfig, ModelSpec, RetryPolicy};
use crate::net::{spawn_service, HttpClient, Party, ServiceHandle, TrafficMeter};

pub const DEMO_DEVICE: &str = "dev1";
pub const DEMO_DEVICE_SECRET: &str = "dev1-secret";
pub const DEMO_CALLBACK_SECRET: &str = "callback-secret";

/// Random provider credential with a 16-hex-digit user id.
pub fn random_credential() -> Credential {
    let mut rng = rand::rng();
    let mut id = [0u8; 8];
    rng.fill_bytes(&mut id);
    let mut secret = [0u8; 32];
    rng.fill_bytes(&mut secret);
    Credential::new(hex::encode(id), secret.to_vec()).expect("generated credential is valid")
}

#[derive(Debug, Clone)]
pub struct StackConfig {
    pub gateway: GatewayConfig,
    pub backend: BackendConfig,
}

impl StackConfig {
    /// A small deployment: three served models, one device allowed to use
    /// them all, and a callback secret shared by both servers.
    pub fn demo(credential: &Credential) -> Self {
        let models = vec![
            ModelSpec::new("m-small", 8, 24),
            ModelSpec::new("m-medium", 16, 48),
            ModelSpec::new("m-large", 24, 64),
        ];
        let names: Vec<String> = models.iter().map(|m| m.name.clone()).collect();
        let gateway = GatewayConfig {
            listen: "127.0.0.1:0".into(),
            registry: vec![IssuerConfig {
                user_id: credential.user_id().to_owned(),
                secret_key: credential.secret_base64(),
                models: None,
            }],
            static_keys: Vec::new(),
            served_models: models,
            callback_secret: DEMO_CALLBACK_SECRET.into(),
            clock_leeway_ms: dynaseal_token::DEFAULT_CLOCK_LEEWAY_MS,
            enforce_constraints: true,
            seed: 7,
            default_max_tokens: 4096,
            callback_retry: RetryPolicy::default(),
            token_delay_ms: 0,
        };
        let backend = BackendConfig {
            listen: "127.0.0.1:0".into(),
            credential: Some(credential.clone()),
            callback_secret: DEMO_CALLBACK_SECRET.into(),
            public_url: None,
            devices: BTreeMap::from([(
                DEMO_DEVICE.to_owned(),
                DeviceConfig {
                    secret: DEMO_DEVICE_SECRET.into(),
                    class: "default".into(),
                },
            )]),
            policy: IssuePolicy {
                allowed_models: BTreeMap::from([("default".to_owned(), names)]),
                max_tokens_ceiling: 4096,
                token_ttl_ms: 1_000,
                per_device_rate: 0,
                max_ttl_secs: dynaseal_token::DEFAULT_MAX_TTL_SECS,
            },
            ledger_path: None,
            relay: None,
        };
        StackConfig { gateway, backend }
    }
}

#[derive(Debug, Clone, Default)]
pub struct StackOptions {
    pub meter: Option<Arc<TrafficMeter>>,
    /// Added before every outbound request from any party.
    pub hop_delay: Duration,
    pub timeout: Option<Duration>,
}

impl StackOptions {
    pub fn client(&self, from: Party) -> HttpClient {
        let mut client = HttpClient::new(self.timeout.unwrap_or(Duration::from_secs(30)))
            .with_hop_delay(self.hop_delay);
        if let Some(meter) = &self.meter {
            client = client.with_meter(meter.clone(), from);
        }
        client
    }
}

#[derive(Debug)]
pub struct Stack {
    pub gateway: Arc<Gateway>,
    pub backend: Arc<Backend>,
    pub options: StackOptions,
    gateway_service: ServiceHandle,
    backend_service: ServiceHandle,
}

#[derive(Debug, thiserror::Error)]
pub enum StackError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot bind: {0}")]
    Bind(#[from] io::Error),
}

impl Stack {
    /// Starts the gateway, then the backend. An empty relay upstream is
    /// pointed at the gateway that was just started.
    pub async fn start(
        mut config: StackConfig,
        clock: Arc<dyn Clock>,
        options: StackOptions,
    ) -> Result<Stack, StackError> {
        let meter = options.meter.as_ref();
        let gateway = Arc::new(Gateway::new(
            config.gateway.clone(),
            clock.clone(),
            options.client(Party::Provider),
        )?);
        let gateway_service = spawn_service(
            &config.gateway.listen,
            gateway::router(gateway.clone()),
            meter.map(|m| (m, Party::Provider)),
        )
        .await?;

        if let Some(relay) = &mut config.backend.relay {
            if relay.upstream_url.is_empty() {
                relay.upstream_url = gateway_service.url();
            }
        }
        let backend = Arc::new(Backend::new(
            config.backend.clone(),
            clock,
            options.client(Party::Backend),
        )?);
        let backend_service = match spawn_service(
            &config.backend.listen,
            backend::router(backend.clone()),
            meter.map(|m| (m, Party::Backend)),
        )
        .await
        {
            Ok(s) => s,
            Err(e) => {
                gateway_service.abort();
                return Err(e.into());
            }
        };
        backend.set_default_public_url(&backend_service.url());
        Ok(Stack {
            gateway,
            backend,
            options,
            gateway_service,
            backend_service,
        })
    }

    pub fn gateway_url(&self) -> String {
        self.gateway_service.url()
    }

    pub fn backend_url(&self) -> String {
        self.backend_service.url()
    }

    pub fn edge_config(&self, device_id: &str, device_secret: &str) -> EdgeConfig {
        EdgeConfig {
            backend_url: self.backend_url(),
            gateway_url: self.gateway_url(),
            device_id: device_id.to_owned(),
            device_secret: device_secret.to_owned(),
            default_model: "m-small".into(),
            request_timeout: self.options.timeout.unwrap_or(Duration::from_secs(30)),
        }
    }

    /// Edge client for the demo device, metered as edge traffic if the stack is.
    pub fn edge_client(&self) -> EdgeClient {
        EdgeClient::new(self.edge_config(DEMO_DEVICE, DEMO_DEVICE_SECRET))
            .expect("stack urls are valid")
            .with_http(self.options.client(Party::Edge))
    }

    /// Waits for in-flight callbacks to settle.
    pub async fn quiesce(&self) {
        self.gateway.callbacks().wait_idle().await;
    }

    pub async fn shutdown(self) {
        self.quiesce().await;
        self.backend_service.abort();
        self.gateway_service.abort();
    }
}
