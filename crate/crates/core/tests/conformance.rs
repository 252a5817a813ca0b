//! Replays the shared JSON fixtures under `fixtures/conformance` against the
//! token verifier and a live gateway. Other client implementations consume
//! the same files.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use dynaseal::gateway::{self, Gateway, GatewayConfig, IssuerConfig, ModelSpec, RetryPolicy};
use dynaseal::net::{spawn_service, HttpClient};
use dynaseal::protocol::ErrorBody;
use dynaseal_token::{verify_token, Credential, DynasealClaims, ManualClock, UnixMillis, VerificationPolicy};
use serde::Deserialize;
use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/conformance").join(name)
}

#[derive(Deserialize)]
struct TokenFixtures {
    user_id: String,
    secret_key_b64: String,
    now_ms: i64,
    leeway_ms: u64,
    cases: Vec<TokenCase>,
}

#[derive(Deserialize)]
struct TokenCase {
    name: String,
    token: String,
    now_ms: Option<i64>,
    expect: Expect,
}

#[derive(Deserialize)]
#[serde(rename_all = "snake_case")]
enum Expect {
    Claims(DynasealClaims),
    Error(String),
}

#[test]
fn token_fixtures_verify_as_recorded() {
    let doc: TokenFixtures =
        serde_json::from_slice(&std::fs::read(fixture("tokens.json")).unwrap()).unwrap();
    let credential = Credential::from_base64(&doc.user_id, &doc.secret_key_b64).unwrap();
    assert!(doc.cases.len() >= 10);
    for case in &doc.cases {
        let clock = ManualClock::new(UnixMillis(case.now_ms.unwrap_or(doc.now_ms)));
        let policy = VerificationPolicy::new(clock, Duration::from_millis(doc.leeway_ms));
        let got = verify_token(&case.token, &credential, &policy);
        match (&case.expect, got) {
            (Expect::Claims(want), Ok(claims)) => assert_eq!(&claims, want, "{}", case.name),
            (Expect::Error(want), Err(e)) => assert_eq!(e.code(), want, "{}", case.name),
            (want, got) => panic!("{}: expected {:?}, got {got:?}", case.name, want_str(want)),
        }
    }
}

fn want_str(e: &Expect) -> String {
    match e {
        Expect::Claims(c) => format!("claims {}", c.jti),
        Expect::Error(code) => code.clone(),
    }
}

#[derive(Deserialize)]
struct RequestFixtures {
    user_id: String,
    secret_key_b64: String,
    now_ms: i64,
    leeway_ms: u64,
    served_models: Vec<ModelSpec>,
    cases: Vec<RequestCase>,
}

#[derive(Deserialize)]
struct RequestCase {
    name: String,
    token: Option<String>,
    body: Value,
    status: u16,
    error: Option<String>,
}

#[tokio::test]
async fn request_fixtures_get_recorded_responses() {
    let doc: RequestFixtures =
        serde_json::from_slice(&std::fs::read(fixture("requests.json")).unwrap()).unwrap();
    let config = GatewayConfig {
        listen: "127.0.0.1:0".into(),
        registry: vec![IssuerConfig {
            user_id: doc.user_id.clone(),
            secret_key: doc.secret_key_b64.clone(),
            models: None,
        }],
        static_keys: Vec::new(),
        served_models: doc.served_models.clone(),
        callback_secret: "cb".into(),
        clock_leeway_ms: doc.leeway_ms,
        enforce_constraints: true,
        seed: 1,
        default_max_tokens: 4096,
        callback_retry: RetryPolicy { base_delay_ms: 1, max_retries: 0 },
        token_delay_ms: 0,
    };
    let clock = ManualClock::new(UnixMillis(doc.now_ms));
    let gw = Arc::new(Gateway::new(config, Arc::new(clock), HttpClient::default()).unwrap());
    let service = spawn_service("127.0.0.1:0", gateway::router(gw.clone()), None).await.unwrap();
    let url = format!("{}/v1/chat/completions", service.url());
    let http = HttpClient::default();

    for case in &doc.cases {
        let bearer = case.token.as_ref().map(|t| format!("Bearer {t}"));
        let headers: Vec<(&str, &str)> = bearer.iter().map(|b| ("authorization", b.as_str())).collect();
        let resp = http.post_json(&url, &headers, &case.body).await.unwrap();
        let status = resp.status.as_u16();
        let body = resp.bytes().await.unwrap();
        assert_eq!(status, case.status, "{}: {}", case.name, String::from_utf8_lossy(&body));
        if let Some(code) = &case.error {
            let err: ErrorBody = serde_json::from_slice(&body).unwrap();
            assert_eq!(&err.error.code, code, "{}", case.name);
        }
    }
    // Only authorized requests reach the engine. An unscoped issuer asking for
    // a model that is not served is refused by the engine itself (404).
    let reached_engine = doc.cases.iter().filter(|c| matches!(c.status, 200 | 404)).count() as u64;
    assert_eq!(gw.stats().generate_calls, reached_engine);
    service.abort();
}
