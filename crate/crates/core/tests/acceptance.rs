//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::future::Future;
use std::panic::AssertUnwindSafe;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use dynaseal::backend::LedgerState;
use dynaseal::baselines::Method;
use dynaseal::bench::{self, BenchOptions, Check, TrafficReport, Workload};
use dynaseal::gateway::{DeliveryOutcome, RetryPolicy};
use dynaseal::net::HttpClient;
use dynaseal::protocol::{CallbackNotification, ChatMessage, ErrorBody, InvocationRequest};
use dynaseal::scenarios::{self, FeatureRow, Provider, ScenarioOptions};
use dynaseal::stack::{random_credential, Stack, StackConfig, StackOptions, DEMO_DEVICE};
use dynaseal_token::{hmac_sha256, parse_unverified, Clock, DynasealClaims, ManualClock, UnixMillis};
use futures::FutureExt;
use jsonwebtoken::{decode, Algorithm, DecodingKey, Validation};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn wall_clock() -> ManualClock {
    let ms = SystemTime::now().duration_since(UNIX_EPOCH).unwrap().as_millis() as i64;
    ManualClock::new(UnixMillis(ms))
}

async fn demo_stack(clock: &ManualClock) -> Result<Stack, String> {
    demo_stack_with(clock, |_| {}).await
}

async fn demo_stack_with(clock: &ManualClock, edit: impl FnOnce(&mut StackConfig)) -> Result<Stack, String> {
    let mut cfg = StackConfig::demo(&random_credential());
    edit(&mut cfg);
    Stack::start(cfg, Arc::new(clock.clone()), StackOptions::default())
        .await
        .map_err(|e| e.to_string())
}

fn hello() -> Vec<ChatMessage> {
    vec![ChatMessage::user("what does the lighthouse keeper write down")]
}

/// Posts a chat request with `token` and returns the status and error code, if any.
async fn present(http: &HttpClient, gateway: &str, token: &str, request: &InvocationRequest) -> Result<(u16, Option<String>), String> {
    let auth = format!("Bearer {token}");
    let resp = http
        .post_json(&format!("{gateway}/v1/chat/completions"), &[("authorization", &auth)], request)
        .await
        .map_err(|e| e.to_string())?;
    let status = resp.status.as_u16();
    let body = resp.bytes().await.map_err(|e| e.to_string())?;
    if status == 200 {
        return Ok((status, None));
    }
    let err: ErrorBody = serde_json::from_slice(&body).map_err(|e| format!("error body: {e}"))?;
    Ok((status, Some(err.error.code)))
}

fn request(model: &str, max_tokens: Option<u32>) -> InvocationRequest {
    InvocationRequest {
        model: model.into(),
        messages: hello(),
        max_tokens,
        stream: false,
    }
}

async fn feature_matrix() -> Outcome {
    let run = scenarios::run_scenarios(ScenarioOptions::default())
        .await
        .map_err(|e| e.to_string())?;
    let row = |p: Provider| run.matrix.rows.get(&p).copied();
    ensure!(
        row(Provider::Dynaseal) == Some(FeatureRow::new(true, true, true, true)),
        "dynaseal row {:?}\n{}",
        row(Provider::Dynaseal),
        run.matrix.render()
    );
    ensure!(
        row(Provider::OpenaiLike) == Some(FeatureRow::new(false, false, false, false)),
        "embedded-key row {:?}\n{}",
        row(Provider::OpenaiLike),
        run.matrix.render()
    );
    let mismatches = run.matrix.mismatches();
    ensure!(mismatches.is_empty(), "rows differ: {mismatches:?}\n{}", run.matrix.render());
    Ok(format!("all {} rows derived from live runs match", run.matrix.rows.len()))
}

async fn tamper() -> Outcome {
    const TOKENS: usize = 25;
    const PER_TOKEN: usize = 48;
    let clock = wall_clock();
    let stack = demo_stack(&clock).await?;
    let edge = stack.edge_client();
    let http = HttpClient::default();
    let gateway = stack.gateway_url();
    let mut rng = ChaCha8Rng::seed_from_u64(0x7a3b);
    let mut codes: BTreeMap<String, usize> = BTreeMap::new();
    let mut accepted = 0;
    for _ in 0..TOKENS {
        let token = edge.acquire_token("m-small", 16).await.map_err(|e| e.to_string())?.token;
        let mutated: Vec<String> = (0..PER_TOKEN).map(|_| scenarios::mutate(&token, &mut rng)).collect();
        let req = request("m-small", None);
        let results = futures::future::join_all(mutated.iter().map(|t| present(&http, &gateway, t, &req)))
        .await;
        for r in results {
            match r? {
                (200, _) => accepted += 1,
                (_, code) => *codes.entry(code.unwrap_or_default()).or_default() += 1,
            }
        }
    }
    let calls = stack.gateway.stats().generate_calls;
    stack.shutdown().await;
    let total = TOKENS * PER_TOKEN;
    ensure!(accepted == 0, "{accepted}/{total} mutated tokens accepted");
    let unexpected: Vec<_> = codes
        .keys()
        .filter(|c| *c != "bad_signature" && *c != "malformed")
        .collect();
    ensure!(unexpected.is_empty(), "unexpected codes {unexpected:?} in {codes:?}");
    ensure!(calls == 0, "engine invoked {calls} times");
    Ok(format!("{total} mutations rejected {codes:?}, engine calls 0"))
}

async fn replay() -> Outcome {
    let clock = wall_clock();
    let stack = demo_stack(&clock).await?;
    let edge = stack.edge_client();
    let gateway = stack.gateway_url();
    let token = edge.acquire_token("m-small", 16).await.map_err(|e| e.to_string())?.token;
    let tasks: Vec<_> = (0..64)
        .map(|_| {
            let (token, gateway) = (token.clone(), gateway.clone());
            tokio::spawn(async move {
                present(&HttpClient::default(), &gateway, &token, &request("m-small", None)).await
            })
        })
        .collect();
    let mut ok = 0;
    let mut replayed = 0;
    for t in tasks {
        match t.await.map_err(|e| e.to_string())?? {
            (200, _) => ok += 1,
            (401, Some(code)) if code == "replay_detected" => replayed += 1,
            other => return Err(format!("unexpected response {other:?}")),
        }
    }
    ensure!(ok == 1 && replayed == 63, "concurrent: {ok} ok, {replayed} replay_detected");

    let http = HttpClient::default();
    let second = edge.acquire_token("m-small", 16).await.map_err(|e| e.to_string())?.token;
    let first_use = present(&http, &gateway, &second, &request("m-small", None)).await?;
    let reuse = present(&http, &gateway, &second, &request("m-small", None)).await?;
    stack.shutdown().await;
    ensure!(first_use.0 == 200, "sequential first use {first_use:?}");
    ensure!(reuse.1.as_deref() == Some("replay_detected"), "sequential reuse {reuse:?}");
    Ok("concurrent 1 ok / 63 replay_detected, sequential reuse replay_detected".into())
}

async fn expiry() -> Outcome {
    let clock = wall_clock();
    let stack = demo_stack_with(&clock, |cfg| cfg.backend.policy.token_ttl_ms = 1000).await?;
    let edge = stack.edge_client();
    let http = HttpClient::default();
    let gateway = stack.gateway_url();
    let leeway = stack.gateway.config().clock_leeway_ms as i64;

    let issued_at = clock.now().0;
    let late = edge.acquire_token("m-small", 16).await.map_err(|e| e.to_string())?.token;
    let claims = parse_unverified(&late).map_err(|e| e.to_string())?.1;
    let lifetime_ms = claims.exp * 1000 - issued_at;
    ensure!(
        (1000..2000).contains(&lifetime_ms),
        "ttl 1000 ms gave exp {} ms after issue",
        lifetime_ms
    );
    let early = edge.acquire_token("m-small", 16).await.map_err(|e| e.to_string())?.token;
    let early_exp = parse_unverified(&early).map_err(|e| e.to_string())?.1.exp;

    clock.set(UnixMillis(early_exp * 1000 - 1));
    let at_edge = present(&http, &gateway, &early, &request("m-small", None)).await?;
    clock.set(UnixMillis(claims.exp * 1000 + leeway + 1000));
    let past = present(&http, &gateway, &late, &request("m-small", None)).await?;
    stack.shutdown().await;
    ensure!(at_edge.0 == 200, "at exp - 1 ms: {at_edge:?}");
    ensure!(past.1.as_deref() == Some("expired"), "at exp + leeway + 1 s: {past:?}");
    Ok(format!("ttl 1 s (exp {lifetime_ms} ms after issue), exp-1ms ok, exp+leeway+1s expired"))
}

async fn constraints(dynaseal: &TrafficReport) -> Outcome {
    let clock = wall_clock();
    let stack = demo_stack(&clock).await?;
    let edge = stack.edge_client();
    let http = HttpClient::default();
    let gateway = stack.gateway_url();
    let t1 = edge.acquire_token("m-small", 16).await.map_err(|e| e.to_string())?.token;
    let mismatch = present(&http, &gateway, &t1, &request("m-large", None)).await?;
    let t2 = edge.acquire_token("m-small", 16).await.map_err(|e| e.to_string())?.token;
    let budget = present(&http, &gateway, &t2, &request("m-small", Some(17))).await?;
    let calls = stack.gateway.stats().generate_calls;
    stack.shutdown().await;
    ensure!(mismatch == (403, Some("model_mismatch".into())), "model change: {mismatch:?}");
    ensure!(budget == (403, Some("token_budget_exceeded".into())), "budget: {budget:?}");
    ensure!(calls == 0, "engine invoked {calls} times for refused requests");
    ensure!(
        dynaseal.successes == dynaseal.n_requests && dynaseal.budget_violations == 0,
        "bench run: {} of {} succeeded, {} budget violations",
        dynaseal.successes,
        dynaseal.n_requests,
        dynaseal.budget_violations
    );
    Ok(format!(
        "model_mismatch and token_budget_exceeded enforced; {} bench responses within budget",
        dynaseal.successes
    ))
}

fn traffic(reports: &[TrafficReport]) -> Outcome {
    let checks: Vec<Check> = bench::traffic_checks(reports);
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| c.to_string()).collect();
    ensure!(
        failed.is_empty(),
        "{}\n{}",
        failed.join("\n"),
        bench::render_table(reports)
    );
    let relay = reports.iter().find(|r| r.method == Method::Relay).unwrap();
    let dynaseal = reports.iter().find(|r| r.method == Method::Dynaseal).unwrap();
    Ok(format!(
        "{} checks; relay backend/provider {:.3}, dynaseal/relay backend {:.3}",
        checks.len(),
        relay.backend_total() as f64 / relay.provider_total() as f64,
        dynaseal.backend_total() as f64 / relay.backend_total() as f64
    ))
}

async fn lifecycle(dynaseal: &TrafficReport) -> Outcome {
    // Full bench run: every issued jti ended in a terminal state.
    let counts = dynaseal.ledger.ok_or("bench report carries no ledger")?;
    ensure!(
        counts.issued == 0 && counts.total() == dynaseal.n_requests,
        "bench ledger {counts:?} for {} requests",
        dynaseal.n_requests
    );

    // Duplicated delivery of every completion changes nothing.
    let clock = wall_clock();
    let stack = demo_stack(&clock).await?;
    let edge = stack.edge_client();
    let mut notifications = Vec::new();
    for model in ["m-small", "m-medium", "m-large"] {
        let r = edge.chat(hello(), Some(model), 32).await.map_err(|e| e.to_string())?.response;
        notifications.push(CallbackNotification {
            jti: r.id.clone(),
            model: r.model.clone(),
            usage: r.usage,
            finish_reason: r.finish_reason,
            response_content: r.content().to_owned(),
            completed_at: clock.now().as_secs(),
        });
    }
    stack.quiesce().await;
    let before = stack.backend.ledger().entries();
    for n in &notifications {
        for _ in 0..3 {
            let outcome = stack.gateway.callbacks().deliver(&stack.backend.callback_url(), n).await;
            ensure!(
                matches!(outcome, DeliveryOutcome::Delivered { .. }),
                "duplicate delivery of {}: {outcome:?}",
                n.jti
            );
        }
    }
    let after = stack.backend.ledger().entries();
    let dup_counts = stack.backend.ledger().counts();
    stack.shutdown().await;
    ensure!(before == after, "ledger changed under duplicated delivery");
    ensure!(dup_counts.completed == 3 && dup_counts.issued == 0, "ledger {dup_counts:?}");

    // Fault injection: the callback target refuses connections.
    let dead_port = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").map_err(|e| e.to_string())?;
        l.local_addr().map_err(|e| e.to_string())?.port()
    };
    let clock = wall_clock();
    let stack = demo_stack_with(&clock, |cfg| {
        cfg.backend.public_url = Some(format!("http://127.0.0.1:{dead_port}"));
        cfg.gateway.callback_retry = RetryPolicy {
            base_delay_ms: 5,
            max_retries: 3,
        };
    })
    .await?;
    let out = stack.edge_client().chat(hello(), None, 16).await;
    stack.quiesce().await;
    let log = stack.gateway.callbacks().log();
    let out = out.map_err(|e| format!("edge call failed under callback fault: {e}"))?;
    let expected = stack
        .gateway
        .engine()
        .generate("m-small", &hello(), 16)
        .map_err(|e| e.to_string())?;
    let pending = stack.backend.ledger().get(&out.response.id).map(|e| e.state);
    clock.advance(Duration::from_secs(10));
    let swept = stack.backend.sweep_expired().map_err(|e| e.to_string())?;
    let final_state = stack.backend.ledger().get(&out.response.id).map(|e| e.state);
    stack.shutdown().await;
    ensure!(out.response.content() == expected.content(), "edge response altered by callback fault");
    ensure!(
        matches!(log.first().map(|r| &r.outcome), Some(DeliveryOutcome::GaveUp { attempts: 4, .. })),
        "callback log {log:?}"
    );
    ensure!(pending == Some(LedgerState::Issued), "state before sweep {pending:?}");
    ensure!(
        swept == 1 && final_state == Some(LedgerState::Expired),
        "sweep {swept}, final state {final_state:?}"
    );
    Ok(format!(
        "bench ledger {counts:?}; 9 duplicate deliveries idempotent; callback fault left edge response intact and entry expired"
    ))
}

async fn cross_oracle() -> Outcome {
    let clock = wall_clock();
    let credential = random_credential();
    let stack = Stack::start(
        StackConfig::demo(&credential),
        Arc::new(clock.clone()),
        StackOptions::default(),
    )
    .await
    .map_err(|e| e.to_string())?;
    let mut checked = 0;
    for (model, max) in [("m-small", 1), ("m-medium", 300), ("m-large", 4096)] {
        let issued = stack
            .backend
            .issue_token(DEMO_DEVICE, model, max)
            .map_err(|e| e.to_string())?;
        let mut validation = Validation::new(Algorithm::HS256);
        // The frozen test clock may sit behind the oracle's wall clock.
        validation.leeway = 5;
        validation.set_required_spec_claims(&["exp", "iat"]);
        let oracle = decode::<DynasealClaims>(
            &issued.token,
            &DecodingKey::from_secret(credential.secret_key()),
            &validation,
        )
        .map_err(|e| format!("oracle rejected token: {e}"))?;
        let ours = parse_unverified(&issued.token).map_err(|e| e.to_string())?.1;
        ensure!(oracle.claims == ours, "claims differ: {:?} vs {:?}", oracle.claims, ours);
        ensure!(
            ours.model == model && ours.max_tokens == max && ours.api_key == credential.user_id(),
            "claims {ours:?}"
        );
        let entry = stack.backend.ledger().get(&ours.jti).ok_or("jti missing from ledger")?;
        ensure!(entry.max_tokens == max && entry.model == model, "ledger entry {entry:?}");
        let wrong = decode::<DynasealClaims>(
            &issued.token,
            &DecodingKey::from_secret(&[0x55; 32]),
            &validation,
        );
        ensure!(wrong.is_err(), "oracle accepted token under a different key");
        checked += 1;
    }
    stack.shutdown().await;

    // RFC 4231 test cases 1, 2, 3, 4, 6 and 7.
    let long_data: &[u8] = b"This is a test using a larger than block-size key and a larger than block-size data. The key needs to be hashed before being used by the HMAC algorithm.";
    let case4_key: Vec<u8> = (1..=25).collect();
    let vectors: [(&[u8], &[u8], &str); 6] = [
        (&[0x0b; 20], b"Hi There", "b0344c61d8db38535ca8afceaf0bf12b881dc200c9833da726e9376c2e32cff7"),
        (b"Jefe", b"what do ya want for nothing?", "5bdcc146bf60754e6a042426089575c75a003f089d2739839dec58b964ec3843"),
        (&[0xaa; 20], &[0xdd; 50], "773ea91e36800e46854db8ebd09181a72959098b3ef8c122d9635514ced565fe"),
        (&case4_key, &[0xcd; 50], "82558a389a443c0ea4cc819899f2083a85f0faa3e578f8077a2e3ff46729665b"),
        (
            &[0xaa; 131],
            b"Test Using Larger Than Block-Size Key - Hash Key First",
            "60e431591ee0b67f0d8a26aacbf5b77f8e0bc6213728c5140546040f0ee37f54",
        ),
        (&[0xaa; 131], long_data, "9b09ffa71b942fcb27635fbcd5b0e944bfdc63644f0713938a7f51535c3a35e2"),
    ];
    for (i, (key, data, expected)) in vectors.iter().enumerate() {
        let got = hex::encode(hmac_sha256(key, data));
        ensure!(&got == expected, "RFC 4231 vector {i}: {got}");
    }
    Ok(format!("{checked} issued tokens accepted by jsonwebtoken with identical claims; 6 RFC 4231 vectors match"))
}

async fn run_bench() -> Result<Vec<TrafficReport>, String> {
    let mut reports = Vec::new();
    for method in Method::ALL {
        let report = bench::run_mode(&Workload::standard(method), &BenchOptions::default())
            .await
            .map_err(|e| e.to_string())?;
        reports.push(report);
    }
    Ok(reports)
}

async fn guarded<T, F: Future<Output = Result<T, String>>>(f: F) -> Result<T, String> {
    match AssertUnwindSafe(f).catch_unwind().await {
        Ok(outcome) => outcome,
        Err(panic) => Err(panic
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

async fn run_all() -> Vec<Check> {
    let mut checks = Vec::new();
    let mut record = |name: &str, outcome: Outcome| {
        let check = match outcome {
            Ok(detail) => Check::new(name, true, detail),
            Err(detail) => Check::new(name, false, detail),
        };
        println!("{check}");
        checks.push(check);
    };

    record("feature matrix reproduction", guarded(feature_matrix()).await);
    record("tamper soundness", guarded(tamper()).await);
    record("replay protection", guarded(replay()).await);
    record("expiry", guarded(expiry()).await);

    let reports = guarded(run_bench()).await;
    match &reports {
        Ok(reports) => {
            let dynaseal = reports.iter().find(|r| r.method == Method::Dynaseal).unwrap();
            record("constraint enforcement", guarded(constraints(dynaseal)).await);
            record("traffic reproduction", traffic(reports));
            record("token lifecycle", guarded(lifecycle(dynaseal)).await);
        }
        Err(e) => {
            for name in ["constraint enforcement", "traffic reproduction", "token lifecycle"] {
                record(name, Err(format!("bench run failed: {e}")));
            }
        }
    }
    record("cross-oracle token check", guarded(cross_oracle()).await);
    checks
}

fn main() -> ExitCode {
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .expect("tokio runtime");
    let checks = runtime.block_on(run_all());
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("acceptance: {} passed, {} failed", checks.len() - failed, failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
