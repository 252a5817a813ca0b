use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;
use std::time::Duration;

use dynaseal::backend::{
    new_jti, Backend, BackendConfig, BackendError, DeviceConfig, IssuePolicy, LedgerState,
};
use dynaseal::net::HttpClient;
use dynaseal::protocol::{CallbackNotification, FinishReason, Usage};
use dynaseal_token::{parse_unverified, verify_token, Credential, ManualClock, UnixMillis, VerificationPolicy};
use proptest::prelude::*;

const START_MS: i64 = 1_700_000_000_000;

fn credential() -> Credential {
    Credential::new("issuer-1", [42u8; 32]).unwrap()
}

fn config(ceiling: u32) -> BackendConfig {
    BackendConfig {
        listen: "127.0.0.1:0".into(),
        credential: Some(credential()),
        callback_secret: "cb".into(),
        public_url: Some("http://backend.test".into()),
        devices: BTreeMap::from([(
            "dev1".to_owned(),
            DeviceConfig {
                secret: "s".into(),
                class: "default".into(),
            },
        )]),
        policy: IssuePolicy {
            allowed_models: BTreeMap::from([(
                "default".to_owned(),
                vec!["m-small".to_owned(), "m-large".to_owned()],
            )]),
            max_tokens_ceiling: ceiling,
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
    (
        Backend::new(config, Arc::new(clock.clone()), HttpClient::default()).unwrap(),
        clock,
    )
}

#[test]
fn a_million_token_ids_are_distinct() {
    let mut seen = HashSet::with_capacity(1_000_000);
    for _ in 0..1_000_000 {
        assert!(seen.insert(new_jti()));
    }
}

#[test]
fn issued_tokens_have_distinct_ids_and_verify() {
    let (b, clock) = backend(config(128));
    let policy = VerificationPolicy::with_clock(clock.clone());
    let mut seen = HashSet::new();
    for _ in 0..10_000 {
        let t = b.issue_token("dev1", "m-small", 64).unwrap();
        let claims = verify_token(&t.token, &credential(), &policy).unwrap();
        assert_eq!(claims.device_id.as_deref(), Some("dev1"));
        assert!(seen.insert(claims.jti));
    }
    assert_eq!(b.ledger().len(), 10_000);
}

#[test]
fn ledger_survives_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(128);
    cfg.ledger_path = Some(dir.path().join("ledger.jsonl"));
    let (jti_done, jti_open) = {
        let (b, _) = backend(cfg.clone());
        let done = parse_unverified(&b.issue_token("dev1", "m-small", 8).unwrap().token).unwrap().1.jti;
        let open = parse_unverified(&b.issue_token("dev1", "m-small", 8).unwrap().token).unwrap().1.jti;
        let n = CallbackNotification {
            jti: done.clone(),
            model: "m-small".into(),
            usage: Usage {
                prompt_tokens: 1,
                completion_tokens: 8,
            },
            finish_reason: FinishReason::Length,
            response_content: "x".into(),
            completed_at: 0,
        };
        b.handle_callback(&n, "cb").unwrap();
        (done, open)
    };
    let (b, clock) = backend(cfg);
    assert_eq!(b.ledger().get(&jti_done).unwrap().state, LedgerState::Completed);
    assert_eq!(b.ledger().get(&jti_open).unwrap().state, LedgerState::Issued);
    clock.advance(Duration::from_secs(10));
    assert_eq!(b.sweep_expired().unwrap(), 1);
    drop(b);
    let (b, _) = backend({
        let mut c = config(128);
        c.ledger_path = Some(dir.path().join("ledger.jsonl"));
        c
    });
    assert_eq!(b.ledger().get(&jti_open).unwrap().state, LedgerState::Expired);
}

proptest! {
    #[test]
    fn issued_budget_never_exceeds_ceiling(ceiling in 1u32..10_000, requests in prop::collection::vec(0u32..50_000, 1..20)) {
        let (b, _) = backend(config(ceiling));
        for requested in requests {
            match b.issue_token("dev1", "m-large", requested) {
                Ok(t) => {
                    let claims = parse_unverified(&t.token).unwrap().1;
                    prop_assert!(requested >= 1);
                    prop_assert_eq!(claims.max_tokens, requested.min(ceiling));
                }
                Err(BackendError::InvalidRequest(_)) => prop_assert_eq!(requested, 0),
                Err(e) => prop_assert!(false, "unexpected {e}"),
            }
        }
    }

    /// Any interleaving of duplicate callbacks and sweeps leaves each entry in
    /// exactly one state, and a completed entry never becomes expired.
    #[test]
    fn ledger_state_machine(ops in prop::collection::vec((0usize..4, 0u8..3), 1..40)) {
        let (b, clock) = backend(config(128));
        let jtis: Vec<String> = (0..4)
            .map(|_| parse_unverified(&b.issue_token("dev1", "m-small", 8).unwrap().token).unwrap().1.jti)
            .collect();
        let mut completed = HashSet::new();
        for (i, op) in ops {
            match op {
                0 | 1 => {
                    let n = CallbackNotification {
                        jti: jtis[i].clone(),
                        model: "m-small".into(),
                        usage: Usage { prompt_tokens: 1, completion_tokens: 2 },
                        finish_reason: FinishReason::Stop,
                        response_content: "ab".into(),
                        completed_at: 0,
                    };
                    if b.handle_callback(&n, "cb").is_ok() {
                        completed.insert(jtis[i].clone());
                    }
                }
                _ => {
                    clock.advance(Duration::from_millis(700));
                    b.sweep_expired().unwrap();
                }
            }
        }
        for jti in &jtis {
            let state = b.ledger().get(jti).unwrap().state;
            prop_assert_eq!(state == LedgerState::Completed, completed.contains(jti));
        }
        let c = b.ledger().counts();
        prop_assert_eq!(c.total(), 4);
    }
}
