//! Security scenarios run against four invocation styles. Every feature
//! flag in the resulting matrix is computed from what the live deployment
//! did, never set by hand.
//!
//! | style        | deployment                                                   |
//! |--------------|--------------------------------------------------------------|
//! | openai-like  | device holds a static provider key scoped to one vendor      |
//! | zhipu-like   | backend-issued expiring tokens, provider ignores the claims  |
//! | oneapi-like  | backend relay redistributing its own static relay keys       |
//! | dynaseal     | backend-issued tokens with enforced model and budget claims |

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine as _;
use dynaseal_token::{ManualClock, UnixMillis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::RelayConfig;
use crate::baselines::{EmbeddedKeyConfig, ModeClient, RelayClientConfig};
use crate::edge::EdgeError;
use crate::gateway::StaticKeyConfig;
use crate::net::Party;
use crate::protocol::{ChatMessage, InvocationRequest};
use crate::stack::{random_credential, Stack, StackConfig, StackError, StackOptions, DEMO_DEVICE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provider {
    OpenaiLike,
    ZhipuLike,
    OneapiLike,
    Dynaseal,
}

impl Provider {
    pub const ALL: [Provider; 4] = [
        Provider::OpenaiLike,
        Provider::ZhipuLike,
        Provider::OneapiLike,
        Provider::Dynaseal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Provider::OpenaiLike => "openai-like",
            Provider::ZhipuLike => "zhipu-like",
            Provider::OneapiLike => "oneapi-like",
            Provider::Dynaseal => "dynaseal",
        }
    }
}

impl std::fmt::Display for Provider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub client_key_control: bool,
    pub anti_tampering: bool,
    pub critical_param_control: bool,
    pub multi_model: bool,
}

impl FeatureRow {
    pub const fn new(client_key_control: bool, anti_tampering: bool, critical_param_control: bool, multi_model: bool) -> Self {
        FeatureRow {
            client_key_control,
            anti_tampering,
            critical_param_control,
            multi_model,
        }
    }

    pub fn cells(&self) -> [bool; 4] {
        [
            self.client_key_control,
            self.anti_tampering,
            self.critical_param_control,
            self.multi_model,
        ]
    }
}

/// The published comparison the derived matrix is checked against.
pub const EXPECTED_MATRIX: [(Provider, FeatureRow); 4] = [
    (Provider::OpenaiLike, FeatureRow::new(false, false, false, false)),
    (Provider::ZhipuLike, FeatureRow::new(true, true, false, false)),
    (Provider::OneapiLike, FeatureRow::new(false, false, false, true)),
    (Provider::Dynaseal, FeatureRow::new(true, true, true, true)),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub rows: BTreeMap<Provider, FeatureRow>,
}

impl FeatureMatrix {
    pub fn expected() -> Self {
        FeatureMatrix {
            rows: EXPECTED_MATRIX.into_iter().collect(),
        }
    }

    /// Providers whose derived row differs from the expected one.
    pub fn mismatches(&self) -> Vec<Provider> {
        EXPECTED_MATRIX
            .iter()
            .filter(|(p, row)| self.rows.get(p) != Some(row))
            .map(|(p, _)| *p)
            .collect()
    }

    pub fn render(&self) -> String {
        let yn = |b: bool| if b { "Yes" } else { "No" };
        let mut out = format!(
            "{:<12}  {:<18}  {:<14}  {:<24}  {}\n",
            "Provider", "Client key control", "Anti-tampering", "Critical param control", "Multi-model"
        );
        for (p, row) in &self.rows {
            let [a, b, c, d] = row.cells();
            out.push_str(&format!(
                "{:<12}  {:<18}  {:<14}  {:<24}  {}\n",
                p.as_str(),
                yn(a),
                yn(b),
                yn(c),
                yn(d)
            ));
        }
        out
    }
}

/// Raw scenario outcomes for one provider. `None` means the scenario never ran.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evidence {
    /// After the backend revoked the device, the device could no longer invoke.
    pub refusal_enforced: Option<bool>,
    /// A credential obtained now no longer works an hour later.
    pub credential_expires: Option<bool>,
    pub mutations_tried: Option<usize>,
    pub mutations_accepted: Option<usize>,
    /// A credential edited to extend its lifetime and budget was refused.
    pub forgery_rejected: Option<bool>,
    /// Requesting another model than the one asked for fails with `model_mismatch`.
    pub model_mismatch_enforced: Option<bool>,
    /// Requesting more tokens than asked for fails with `token_budget_exceeded`.
    pub budget_enforced: Option<bool>,
    /// Two distinct served models can both be invoked.
    pub multi_model_served: Option<bool>,
    /// Human-readable trace of each step.
    pub log: Vec<String>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MatrixError {
    #[error("incomplete evidence for {provider}: scenario {scenario:?} did not run")]
    IncompleteEvidence {
        provider: Provider,
        scenario: &'static str,
    },
}

fn need<T: Copy>(v: Option<T>, provider: Provider, scenario: &'static str) -> Result<T, MatrixError> {
    v.ok_or(MatrixError::IncompleteEvidence { provider, scenario })
}

/// Derives each flag from scenario outcomes.
pub fn derive_row(provider: Provider, e: &Evidence) -> Result<FeatureRow, MatrixError> {
    let tried = need(e.mutations_tried, provider, "tamper")?;
    let accepted = need(e.mutations_accepted, provider, "tamper")?;
    Ok(FeatureRow {
        client_key_control: need(e.refusal_enforced, provider, "refusal")?
            && need(e.credential_expires, provider, "expiry")?,
        anti_tampering: tried > 0 && accepted == 0 && need(e.forgery_rejected, provider, "forgery")?,
        critical_param_control: need(e.model_mismatch_enforced, provider, "model_mismatch")?
            && need(e.budget_enforced, provider, "token_budget")?,
        multi_model: need(e.multi_model_served, provider, "multi_model")?,
    })
}

pub fn build_feature_matrix(evidence: &BTreeMap<Provider, Evidence>) -> Result<FeatureMatrix, MatrixError> {
    let mut rows = BTreeMap::new();
    for provider in Provider::ALL {
        let e = evidence.get(&provider).ok_or(MatrixError::IncompleteEvidence {
            provider,
            scenario: "all",
        })?;
        rows.insert(provider, derive_row(provider, e)?);
    }
    Ok(FeatureMatrix { rows })
}

#[derive(Debug, Clone, Copy)]
pub struct ScenarioOptions {
    pub mutations: usize,
    pub seed: u64,
}

impl Default for ScenarioOptions {
    fn default() -> Self {
        ScenarioOptions {
            mutations: 200,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Stack(#[from] StackError),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioRun {
    pub evidence: BTreeMap<Provider, Evidence>,
    pub matrix: FeatureMatrix,
}

const VENDOR_A: [&str; 2] = ["m-small", "m-medium"];
const OTHER_VENDOR_MODEL: &str = "m-large";
const HOUR: Duration = Duration::from_secs(3600);

fn random_secret(prefix: &str, rng: &mut ChaCha8Rng) -> String {
    let bytes: [u8; 16] = rng.random();
    format!("{prefix}{}", hex::encode(bytes))
}

struct Deployment {
    stack: Stack,
    clock: ManualClock,
    client: ModeClient,
    relay_key: Option<String>,
}

async fn deploy(provider: Provider, rng: &mut ChaCha8Rng) -> Result<Deployment, StackError> {
    let credential = random_credential();
    let mut config = StackConfig::demo(&credential);
    let vendor_a = Some(VENDOR_A.iter().map(|m| m.to_string()).collect::<Vec<_>>());
    let static_key = random_secret("sk-", rng);
    let relay_key = random_secret("rk-", rng);
    match provider {
        Provider::OpenaiLike => config.gateway.static_keys.push(StaticKeyConfig {
            key: static_key.clone(),
            label: "device".into(),
            models: vendor_a,
        }),
        Provider::ZhipuLike => {
            config.gateway.enforce_constraints = false;
            config.gateway.registry[0].models = vendor_a;
        }
        Provider::OneapiLike => {
            config.gateway.static_keys.push(StaticKeyConfig {
                key: static_key.clone(),
                label: "relay-upstream".into(),
                models: None,
            });
            config.backend.credential = None;
            config.backend.relay = Some(RelayConfig {
                upstream_url: String::new(),
                provider_key: static_key.clone(),
                keys: vec![relay_key.clone()],
            });
        }
        Provider::Dynaseal => {}
    }
    let ms = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or(0);
    let clock = ManualClock::new(UnixMillis(ms));
    let stack = Stack::start(config, Arc::new(clock.clone()), StackOptions::default()).await?;
    let client = match provider {
        Provider::OpenaiLike => ModeClient::Embedded {
            config: EmbeddedKeyConfig {
                gateway_url: stack.gateway_url(),
                api_key: static_key,
            },
            http: stack.options.client(Party::Edge),
        },
        Provider::OneapiLike => ModeClient::Relay {
            config: RelayClientConfig {
                backend_url: stack.backend_url(),
                relay_key: relay_key.clone(),
            },
            http: stack.options.client(Party::Edge),
        },
        Provider::ZhipuLike | Provider::Dynaseal => ModeClient::Dynaseal(stack.edge_client()),
    };
    Ok(Deployment {
        stack,
        clock,
        client,
        relay_key: Some(relay_key),
    })
}

fn request(model: &str, max_tokens: Option<u32>) -> InvocationRequest {
    InvocationRequest {
        model: model.into(),
        messages: vec![ChatMessage::user("summarise the ledger window")],
        max_tokens,
        stream: false,
    }
}

fn describe(result: &Result<impl Sized, EdgeError>) -> String {
    match result {
        Ok(_) => "accepted".into(),
        Err(EdgeError::Gateway { status, code, .. }) => format!("rejected {status} {code}"),
        Err(EdgeError::IssueRefused { status, code }) => format!("issuance refused {status} {code}"),
        Err(e) => format!("failed: {e}"),
    }
}

/// Gets a credential for the stated intent and then sends `req` with it.
async fn attempt(
    d: &Deployment,
    intent: (&str, u32),
    req: &InvocationRequest,
) -> Result<crate::protocol::InvocationResponse, EdgeError> {
    let credential = d.client.credential(intent.0, intent.1).await?;
    d.client.invoke_with(&credential, req).await
}

/// Replaces one byte with a different printable ASCII character.
pub fn mutate(credential: &str, rng: &mut impl Rng) -> String {
    let mut bytes = credential.as_bytes().to_vec();
    let pos = rng.random_range(0..bytes.len());
    loop {
        let b = rng.random_range(0x21u8..=0x7e);
        if b != bytes[pos] {
            bytes[pos] = b;
            break;
        }
    }
    String::from_utf8(bytes).expect("printable ascii")
}

/// Rewrites a compact token's claims to live an hour longer with a hundred
/// times the budget, keeping the original signature. Opaque keys are
/// returned unchanged, since there is nothing in them to extend.
pub fn forge_extension(credential: &str) -> String {
    let parts: Vec<&str> = credential.split('.').collect();
    if parts.len() != 3 {
        return credential.to_owned();
    }
    let Some(mut claims) = URL_SAFE_NO_PAD
        .decode(parts[1])
        .ok()
        .and_then(|raw| serde_json::from_slice::<serde_json::Value>(&raw).ok())
    else {
        return credential.to_owned();
    };
    if let Some(exp) = claims.get("exp").and_then(|v| v.as_i64()) {
        claims["exp"] = (exp + 3600).into();
    }
    if let Some(max) = claims.get("max_tokens").and_then(|v| v.as_u64()) {
        claims["max_tokens"] = (max * 100).into();
    }
    let body = URL_SAFE_NO_PAD.encode(serde_json::to_vec(&claims).expect("json value"));
    format!("{}.{body}.{}", parts[0], parts[2])
}

/// Runs every scenario against one freshly deployed provider style.
pub async fn collect_evidence(provider: Provider, options: ScenarioOptions) -> Result<Evidence, StackError> {
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed ^ provider as u64);
    let d = deploy(provider, &mut rng).await?;
    let mut e = Evidence::default();

    // Multi-model: two models from different vendors.
    let mut all_ok = true;
    for model in ["m-small", OTHER_VENDOR_MODEL] {
        let r = attempt(&d, (model, 16), &request(model, None)).await;
        e.log.push(format!("multi_model {model}: {}", describe(&r)));
        all_ok &= r.is_ok();
    }
    e.multi_model_served = Some(all_ok);

    // Critical parameters: ask for (m-small, 16), then try to exceed it.
    let r = attempt(&d, ("m-small", 16), &request("m-medium", None)).await;
    e.log.push(format!("model_mismatch: {}", describe(&r)));
    e.model_mismatch_enforced = Some(matches!(&r, Err(err) if err.gateway_code() == Some("model_mismatch")));
    let r = attempt(&d, ("m-small", 16), &request("m-small", Some(4096))).await;
    e.log.push(format!("token_budget: {}", describe(&r)));
    e.budget_enforced = Some(matches!(&r, Err(err) if err.gateway_code() == Some("token_budget_exceeded")));

    // Tampering: random single-byte edits of a fresh credential.
    let credential = d.client.credential("m-small", 16).await;
    match credential {
        Ok(credential) => {
            let mut accepted = 0;
            for _ in 0..options.mutations {
                let mutated = mutate(&credential, &mut rng);
                if d.client.invoke_with(&mutated, &request("m-small", None)).await.is_ok() {
                    accepted += 1;
                }
            }
            e.log.push(format!("tamper: {accepted}/{} mutations accepted", options.mutations));
            e.mutations_tried = Some(options.mutations);
            e.mutations_accepted = Some(accepted);
        }
        Err(err) => e.log.push(format!("tamper: could not obtain a credential: {err}")),
    }

    // Forgery: stretch lifetime and budget, then use it an hour later.
    if let Ok(credential) = d.client.credential("m-small", 16).await {
        let forged = forge_extension(&credential);
        d.clock.advance(HOUR);
        let r = d.client.invoke_with(&forged, &request("m-small", Some(1600))).await;
        e.log.push(format!("forged extension after 1h: {}", describe(&r)));
        e.forgery_rejected = Some(r.is_err());
    }

    // Expiry: an honest credential an hour after it was obtained.
    if let Ok(credential) = d.client.credential("m-small", 16).await {
        d.clock.advance(HOUR);
        let r = d.client.invoke_with(&credential, &request("m-small", None)).await;
        e.log.push(format!("credential after 1h: {}", describe(&r)));
        e.credential_expires = Some(r.is_err());
    }

    // Refusal: the backend withdraws the device's access.
    d.stack.backend.revoke_device(DEMO_DEVICE);
    if let Some(key) = &d.relay_key {
        d.stack.backend.revoke_relay_key(key);
    }
    let r = attempt(&d, ("m-small", 16), &request("m-small", None)).await;
    e.log.push(format!("after revocation: {}", describe(&r)));
    e.refusal_enforced = Some(r.is_err());

    d.stack.shutdown().await;
    Ok(e)
}

/// Runs all four provider styles and derives the matrix.
pub async fn run_scenarios(options: ScenarioOptions) -> Result<ScenarioRun, ScenarioError> {
    let mut evidence = BTreeMap::new();
    for provider in Provider::ALL {
        evidence.insert(provider, collect_evidence(provider, options).await?);
    }
    let matrix = build_feature_matrix(&evidence)?;
    Ok(ScenarioRun { evidence, matrix })
}
