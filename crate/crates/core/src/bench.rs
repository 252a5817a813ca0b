//! Traffic bench: runs one workload against a metered loopback deployment of
//! a given method and reports application-layer bytes per party.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use dynaseal_token::{ManualClock, UnixMillis};
use futures::StreamExt;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{RelayConfig, StateCounts};
use crate::baselines::{holds_provider_secret, EmbeddedKeyConfig, Method, ModeClient, RelayClientConfig};
use crate::gateway::{ModelSpec, StaticKeyConfig};
use crate::net::{Party, TrafficMeter};
use crate::protocol::{ChatMessage, InvocationRequest};
use crate::stack::{random_credential, Stack, StackConfig, StackError, StackOptions};

pub const BENCH_MODEL: &str = "m-bench";

fn default_parallelism() -> usize {
    1
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workload {
    pub method: Method,
    pub n_requests: usize,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    /// Size of the user message in each request.
    pub prompt_bytes: usize,
    /// Every request generates exactly this many tokens.
    pub expected_completion_tokens: u32,
    #[serde(default = "default_true")]
    pub stream: bool,
}

impl Workload {
    /// Ten streamed requests with roughly 8 KiB of generated text each.
    pub fn standard(method: Method) -> Self {
        Workload {
            method,
            n_requests: 10,
            parallelism: 2,
            prompt_bytes: 512,
            expected_completion_tokens: 1_300,
            stream: true,
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.n_requests == 0 || self.parallelism == 0 || self.expected_completion_tokens == 0 {
            return Err(BenchError::Workload(
                "n_requests, parallelism and expected_completion_tokens must be positive".into(),
            ));
        }
        Ok(())
    }

    fn prompt(&self, index: usize) -> String {
        let mut text = format!("request {index}:");
        let mut i = 0;
        while text.len() < self.prompt_bytes {
            write!(text, " word{i}").unwrap();
            i += 1;
        }
        text.truncate(self.prompt_bytes.max(1));
        text
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KeyDeployment {
    Required,
    #[serde(rename = "Not Required")]
    NotRequired,
}

impl std::fmt::Display for KeyDeployment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            KeyDeployment::Required => "Required",
            KeyDeployment::NotRequired => "Not Required",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficReport {
    pub method: Method,
    pub n_requests: usize,
    pub parallelism: usize,
    pub payload_bytes: usize,
    pub stream: bool,
    /// Bytes at the provider's listener.
    pub provider_in: u64,
    pub provider_out: u64,
    /// Bytes at the backend's listener plus its own calls to the provider.
    pub backend_in: u64,
    pub backend_out: u64,
    pub edge_in: u64,
    pub edge_out: u64,
    /// Provider-to-backend callback traffic, already part of the backend counters.
    pub callback_bytes: u64,
    pub key_predeployment: KeyDeployment,
    pub successes: usize,
    pub failures: usize,
    pub mean_latency_ms: f64,
    pub mean_content_bytes: f64,
    pub completion_tokens_total: u64,
    /// Responses whose completion exceeded the requested budget, seen from
    /// either side.
    pub budget_violations: u64,
    pub conservation_violations: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ledger: Option<StateCounts>,
}

impl TrafficReport {
    pub fn provider_total(&self) -> u64 {
        self.provider_in + self.provider_out
    }

    pub fn backend_total(&self) -> u64 {
        self.backend_in + self.backend_out
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid workload: {0}")]
    Workload(String),
    #[error(transparent)]
    Stack(#[from] StackError),
}

#[derive(Debug, Clone, Default)]
pub struct BenchOptions {
    /// Added before every request each party sends.
    pub hop_delay: Duration,
}

fn random_key(prefix: &str) -> String {
    let mut bytes = [0u8; 16];
    rand::rng().fill_bytes(&mut bytes);
    format!("{prefix}{}", hex::encode(bytes))
}

fn wall_clock() -> ManualClock {
    let ms = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or(0);
    ManualClock::new(UnixMillis(ms))
}

pub async fn run_embedded_mode(workload: &Workload, options: &BenchOptions) -> Result<TrafficReport, BenchError> {
    run_mode(&Workload { method: Method::Embedded, ..workload.clone() }, options).await
}

pub async fn run_relay_mode(workload: &Workload, options: &BenchOptions) -> Result<TrafficReport, BenchError> {
    run_mode(&Workload { method: Method::Relay, ..workload.clone() }, options).await
}

pub async fn run_dynaseal_mode(workload: &Workload, options: &BenchOptions) -> Result<TrafficReport, BenchError> {
    run_mode(&Workload { method: Method::Dynaseal, ..workload.clone() }, options).await
}

/// Deploys a fresh metered stack for `workload.method` and drives the workload.
pub async fn run_mode(workload: &Workload, options: &BenchOptions) -> Result<TrafficReport, BenchError> {
    workload.validate()?;
    let credential = random_credential();
    let mut config = StackConfig::demo(&credential);
    let n = workload.expected_completion_tokens;
    config.gateway.served_models.push(ModelSpec::new(BENCH_MODEL, n, n));
    for models in config.backend.policy.allowed_models.values_mut() {
        models.push(BENCH_MODEL.into());
    }
    config.backend.policy.max_tokens_ceiling = config.backend.policy.max_tokens_ceiling.max(n);
    config.gateway.default_max_tokens = config.gateway.default_max_tokens.max(n);

    let mut provider_secrets = vec![credential.secret_base64()];
    let embedded_key = random_key("sk-embedded-");
    let upstream_key = random_key("sk-upstream-");
    let relay_key = random_key("rk-");
    match workload.method {
        Method::Embedded => config.gateway.static_keys.push(StaticKeyConfig {
            key: embedded_key.clone(),
            label: "embedded".into(),
            models: None,
        }),
        Method::Relay => {
            config.gateway.static_keys.push(StaticKeyConfig {
                key: upstream_key.clone(),
                label: "relay-upstream".into(),
                models: None,
            });
            config.backend.credential = None;
            config.backend.relay = Some(RelayConfig {
                upstream_url: String::new(),
                provider_key: upstream_key.clone(),
                keys: vec![relay_key.clone()],
            });
        }
        Method::Dynaseal => {}
    }
    provider_secrets.extend(config.gateway.static_keys.iter().map(|k| k.key.clone()));

    let meter = TrafficMeter::new();
    let clock = wall_clock();
    let options = StackOptions {
        meter: Some(meter.clone()),
        hop_delay: options.hop_delay,
        timeout: None,
    };
    let stack = Stack::start(config, Arc::new(clock.clone()), options).await?;
    let client = match workload.method {
        Method::Embedded => ModeClient::Embedded {
            config: EmbeddedKeyConfig {
                gateway_url: stack.gateway_url(),
                api_key: embedded_key,
            },
            http: stack.options.client(Party::Edge),
        },
        Method::Relay => ModeClient::Relay {
            config: RelayClientConfig {
                backend_url: stack.backend_url(),
                relay_key,
            },
            http: stack.options.client(Party::Edge),
        },
        Method::Dynaseal => ModeClient::Dynaseal(stack.edge_client()),
    };
    let key_predeployment = if holds_provider_secret(&client.device_config(), &provider_secrets) {
        KeyDeployment::Required
    } else {
        KeyDeployment::NotRequired
    };

    let client = &client;
    let results: Vec<_> = futures::stream::iter(0..workload.n_requests)
        .map(|i| {
            let request = InvocationRequest {
                model: BENCH_MODEL.into(),
                messages: vec![ChatMessage::user(workload.prompt(i))],
                max_tokens: None,
                stream: workload.stream,
            };
            async move {
                let started = Instant::now();
                let result = client.chat(&request, n).await;
                (started.elapsed(), result)
            }
        })
        .buffer_unordered(workload.parallelism)
        .collect()
        .await;
    stack.quiesce().await;

    let mut successes = 0;
    let mut latency = Duration::ZERO;
    let mut content_bytes = 0usize;
    let mut completion_tokens_total = 0u64;
    let mut budget_violations = 0u64;
    for (elapsed, result) in &results {
        match result {
            Ok(r) => {
                successes += 1;
                latency += *elapsed;
                content_bytes += r.content().len();
                completion_tokens_total += u64::from(r.usage.completion_tokens);
                if r.usage.completion_tokens > n {
                    budget_violations += 1;
                }
            }
            Err(e) => tracing::warn!(error = %e, method = %workload.method, "bench request failed"),
        }
    }
    budget_violations += stack.gateway.stats().budget_violations;

    let ledger = if workload.method == Method::Dynaseal {
        // Push the clock past every token's grace period, then close out
        // whatever was never completed.
        let policy = &stack.backend.config().policy;
        clock.advance(Duration::from_millis(
            (policy.max_ttl_secs as u64 + 1) * 1000 + policy.token_ttl_ms,
        ));
        let _ = stack.backend.sweep_expired();
        Some(stack.backend.ledger().counts())
    } else {
        None
    };

    let provider = meter.served(Party::Provider);
    let backend_served = meter.served(Party::Backend);
    let backend_upstream = meter.sent(Party::Backend, Party::Provider);
    let edge = meter.outbound(Party::Edge);
    let callbacks = meter.sent(Party::Provider, Party::Backend);
    let report = TrafficReport {
        method: workload.method,
        n_requests: workload.n_requests,
        parallelism: workload.parallelism,
        payload_bytes: workload.prompt_bytes,
        stream: workload.stream,
        provider_in: provider.read,
        provider_out: provider.written,
        backend_in: backend_served.read + backend_upstream.read,
        backend_out: backend_served.written + backend_upstream.written,
        edge_in: edge.read,
        edge_out: edge.written,
        callback_bytes: callbacks.total(),
        key_predeployment,
        successes,
        failures: results.len() - successes,
        mean_latency_ms: if successes == 0 {
            0.0
        } else {
            latency.as_secs_f64() * 1000.0 / successes as f64
        },
        mean_content_bytes: if successes == 0 {
            0.0
        } else {
            content_bytes as f64 / successes as f64
        },
        completion_tokens_total,
        budget_violations,
        conservation_violations: meter.conservation_violations(),
        ledger,
    };
    stack.shutdown().await;
    Ok(report)
}

/// One verified relation, printable as a PASS/FAIL line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {}: {}", self.name, self.detail)
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        f64::INFINITY
    } else {
        a as f64 / b as f64
    }
}

fn find(reports: &[TrafficReport], method: Method) -> Option<&TrafficReport> {
    reports.iter().find(|r| r.method == method)
}

/// Relative relations expected between the three methods.
pub fn traffic_checks(reports: &[TrafficReport]) -> Vec<Check> {
    let (Some(emb), Some(relay), Some(dyn_)) = (
        find(reports, Method::Embedded),
        find(reports, Method::Relay),
        find(reports, Method::Dynaseal),
    ) else {
        return vec![Check::new("reports", false, "need one report per method")];
    };
    let mut checks = Vec::new();
    checks.push(Check::new(
        "all requests succeeded",
        reports.iter().all(|r| r.failures == 0 && r.successes == r.n_requests),
        reports
            .iter()
            .map(|r| format!("{}: {}/{}", r.method, r.successes, r.n_requests))
            .collect::<Vec<_>>()
            .join(", "),
    ));
    checks.push(Check::new(
        "embedded backend bytes = 0",
        emb.backend_total() == 0,
        format!("{} bytes", emb.backend_total()),
    ));
    let r = ratio(relay.backend_total(), relay.provider_total());
    checks.push(Check::new(
        "relay backend in [1.9x, 2.1x] provider",
        (1.9..=2.1).contains(&r),
        format!("{} / {} = {r:.3}", relay.backend_total(), relay.provider_total()),
    ));
    let r = ratio(dyn_.backend_total(), relay.backend_total());
    checks.push(Check::new(
        "dynaseal backend <= 25% of relay backend",
        r <= 0.25,
        format!("{} / {} = {:.1}%", dyn_.backend_total(), relay.backend_total(), r * 100.0),
    ));
    let provider: Vec<u64> = [emb, relay, dyn_].iter().map(|r| r.provider_total()).collect();
    let (lo, hi) = (*provider.iter().min().unwrap(), *provider.iter().max().unwrap());
    let spread = ratio(hi - lo, lo);
    checks.push(Check::new(
        "provider bytes within 5% across methods",
        spread <= 0.05,
        format!("{provider:?}, spread {:.2}%", spread * 100.0),
    ));
    let flags = [emb.key_predeployment, relay.key_predeployment, dyn_.key_predeployment];
    checks.push(Check::new(
        "key pre-deployment (Required, Not Required, Not Required)",
        flags == [KeyDeployment::Required, KeyDeployment::NotRequired, KeyDeployment::NotRequired],
        format!("{}, {}, {}", flags[0], flags[1], flags[2]),
    ));
    checks.push(Check::new(
        "completion_tokens within budget on every response",
        reports.iter().all(|r| r.budget_violations == 0),
        format!(
            "violations: {}",
            reports.iter().map(|r| r.budget_violations).sum::<u64>()
        ),
    ));
    let violations: Vec<String> = reports
        .iter()
        .flat_map(|r| r.conservation_violations.iter().map(move |v| format!("{}: {v}", r.method)))
        .collect();
    checks.push(Check::new(
        "byte conservation between clients and listeners",
        violations.is_empty(),
        if violations.is_empty() {
            "all links balance".to_owned()
        } else {
            violations.join("; ")
        },
    ));
    checks
}

/// Qualitative label for a report's backend traffic, relative to the others.
pub fn backend_label(report: &TrafficReport, reports: &[TrafficReport]) -> String {
    if report.backend_total() == 0 {
        return "None".into();
    }
    let r = ratio(report.backend_total(), report.provider_total());
    if (1.9..=2.1).contains(&r) {
        return "2x".into();
    }
    let max_backend = reports.iter().map(|r| r.backend_total()).max().unwrap_or(0);
    if ratio(report.backend_total(), max_backend) <= 0.25 {
        return "Minimal".into();
    }
    format!("{r:.2}x")
}

pub fn provider_label(report: &TrafficReport, reports: &[TrafficReport]) -> String {
    let min = reports.iter().map(|r| r.provider_total()).min().unwrap_or(0);
    if ratio(report.provider_total() - min, min) <= 0.05 {
        "Normal".into()
    } else {
        "Elevated".into()
    }
}

/// Aligned text table with one row per method.
pub fn render_table(reports: &[TrafficReport]) -> String {
    let header = [
        "Method",
        "Provider bytes",
        "Backend bytes",
        "Provider traffic",
        "Backend traffic",
        "Client-side key pre-deployment",
    ];
    let rows: Vec<[String; 6]> = reports
        .iter()
        .map(|r| {
            [
                r.method.to_string(),
                r.provider_total().to_string(),
                r.backend_total().to_string(),
                provider_label(r, reports),
                backend_label(r, reports),
                r.key_predeployment.to_string(),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &[&str]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        out.push_str(padded.join("  ").trim_end());
        out.push('\n');
    };
    line(&mut out, &header);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    line(&mut out, &rule.iter().map(String::as_str).collect::<Vec<_>>());
    for row in &rows {
        line(&mut out, &row.iter().map(String::as_str).collect::<Vec<_>>());
    }
    out
}
