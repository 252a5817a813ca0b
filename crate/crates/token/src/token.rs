use std::time::Duration;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use hmac::{Hmac, KeyInit, Mac};
use serde::{Deserialize, Serialize};
use sha2::Sha256;

use crate::claims::{DynasealClaims, DEFAULT_MAX_TTL_SECS};
use crate::clock::{Clock, SystemClock, UnixMillis};
use crate::credential::Credential;
use crate::error::{SignError, VerifyError};

type HmacSha256 = Hmac<Sha256>;

/// The only header this crate emits.
pub const HEADER_JSON: &str = r#"{"alg":"HS256","typ":"JWT"}"#;

/// Registered JWS algorithm identifiers. Anything else in `alg` is not a
/// well-formed header.
const JWA_ALGORITHMS: &[&str] = &[
    "none", "HS256", "HS384", "HS512", "RS256", "RS384", "RS512", "ES256", "ES384", "ES512",
    "ES256K", "PS256", "PS384", "PS512", "EdDSA",
];

pub const DEFAULT_CLOCK_LEEWAY_MS: u64 = 500;
pub const MAX_CLOCK_LEEWAY_MS: u64 = 2_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenHeader {
    pub alg: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub typ: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignedToken {
    pub header: TokenHeader,
    pub claims: DynasealClaims,
    pub signature: [u8; 32],
    pub compact: String,
}

impl SignedToken {
    pub fn as_str(&self) -> &str {
        &self.compact
    }
}

/// Raw HMAC-SHA-256.
pub fn hmac_sha256(key: &[u8], data: &[u8]) -> [u8; 32] {
    let mut mac = HmacSha256::new_from_slice(key).expect("HMAC accepts keys of any length");
    mac.update(data);
    mac.finalize().into_bytes().into()
}

pub fn sign_token(claims: &DynasealClaims, credential: &Credential) -> Result<SignedToken, SignError> {
    sign_token_with_max_ttl(claims, credential, DEFAULT_MAX_TTL_SECS)
}

pub fn sign_token_with_max_ttl(
    claims: &DynasealClaims,
    credential: &Credential,
    max_ttl_secs: i64,
) -> Result<SignedToken, SignError> {
    claims.validate(max_ttl_secs)?;
    if claims.api_key != credential.user_id() {
        return Err(SignError::IssuerMismatch {
            api_key: claims.api_key.clone(),
            user_id: credential.user_id().to_owned(),
        });
    }

    let mut compact = URL_SAFE_NO_PAD.encode(HEADER_JSON);
    compact.push('.');
    URL_SAFE_NO_PAD.encode_string(claims.canonical_json(), &mut compact);
    let signature = hmac_sha256(credential.secret_key(), compact.as_bytes());
    compact.push('.');
    URL_SAFE_NO_PAD.encode_string(signature, &mut compact);

    Ok(SignedToken {
        header: TokenHeader {
            alg: "HS256".into(),
            typ: Some("JWT".into()),
        },
        claims: claims.clone(),
        signature,
        compact,
    })
}

/// Clock and skew tolerance used when checking `iat`/`exp`.
#[derive(Debug, Clone)]
pub struct VerificationPolicy<C = SystemClock> {
    clock_leeway: Duration,
    clock: C,
}

impl Default for VerificationPolicy<SystemClock> {
    fn default() -> Self {
        VerificationPolicy {
            clock_leeway: Duration::from_millis(DEFAULT_CLOCK_LEEWAY_MS),
            clock: SystemClock,
        }
    }
}

impl<C: Clock> VerificationPolicy<C> {
    /// Leeway is clamped to `MAX_CLOCK_LEEWAY_MS`.
    pub fn new(clock: C, clock_leeway: Duration) -> Self {
        let clock_leeway = clock_leeway.min(Duration::from_millis(MAX_CLOCK_LEEWAY_MS));
        VerificationPolicy { clock_leeway, clock }
    }

    pub fn with_clock(clock: C) -> Self {
        Self::new(clock, Duration::from_millis(DEFAULT_CLOCK_LEEWAY_MS))
    }

    pub fn clock_leeway(&self) -> Duration {
        self.clock_leeway
    }

    pub fn now(&self) -> UnixMillis {
        self.clock.now()
    }
}

struct Segments<'a> {
    header_b64: &'a str,
    claims_b64: &'a str,
    signature_b64: &'a str,
}

fn split(compact: &str) -> Result<Segments<'_>, VerifyError> {
    let mut parts = compact.split('.');
    match (parts.next(), parts.next(), parts.next(), parts.next()) {
        (Some(h), Some(c), Some(s), None) => Ok(Segments {
            header_b64: h,
            claims_b64: c,
            signature_b64: s,
        }),
        _ => Err(VerifyError::Malformed("expected three dot-separated segments".into())),
    }
}

fn decode_segment(segment: &str, what: &str) -> Result<Vec<u8>, VerifyError> {
    URL_SAFE_NO_PAD
        .decode(segment)
        .map_err(|e| VerifyError::Malformed(format!("{what}: {e}")))
}

fn decode_header(segment: &str) -> Result<TokenHeader, VerifyError> {
    let bytes = decode_segment(segment, "header")?;
    serde_json::from_slice(&bytes).map_err(|e| VerifyError::Malformed(format!("header: {e}")))
}

fn decode_claims(segment: &str) -> Result<DynasealClaims, VerifyError> {
    let bytes = decode_segment(segment, "claims")?;
    serde_json::from_slice(&bytes).map_err(|e| VerifyError::Malformed(format!("claims: {e}")))
}

/// Decodes header and claims without checking the signature or times.
/// The result carries no authenticity guarantee.
pub fn parse_unverified(compact: &str) -> Result<(TokenHeader, DynasealClaims), VerifyError> {
    let segs = split(compact)?;
    let header = decode_header(segs.header_b64)?;
    let claims = decode_claims(segs.claims_b64)?;
    decode_segment(segs.signature_b64, "signature")?;
    Ok((header, claims))
}

/// Checks structure, algorithm, MAC (constant time) and then the validity
/// window, in that order. Claims are only interpreted after the MAC matches.
pub fn verify_token<C: Clock>(
    compact: &str,
    credential: &Credential,
    policy: &VerificationPolicy<C>,
) -> Result<DynasealClaims, VerifyError> {
    let segs = split(compact)?;
    let header = decode_header(segs.header_b64)?;
    // Structure of the remaining segments is checked before the algorithm so
    // that garbage is always reported as malformed.
    decode_segment(segs.claims_b64, "claims")?;
    let signature = decode_segment(segs.signature_b64, "signature")?;
    if header.alg != "HS256" {
        if JWA_ALGORITHMS.contains(&header.alg.as_str()) {
            return Err(VerifyError::AlgRejected(header.alg));
        }
        return Err(VerifyError::Malformed(format!("unknown alg {:?}", header.alg)));
    }

    let signed_len = segs.header_b64.len() + 1 + segs.claims_b64.len();
    let mut mac = HmacSha256::new_from_slice(credential.secret_key()).expect("any key length");
    mac.update(&compact.as_bytes()[..signed_len]);
    mac.verify_slice(&signature)
        .map_err(|_| VerifyError::BadSignature)?;

    let claims = decode_claims(segs.claims_b64)?;
    // A correctly signed token can still carry nonsense; treat it as malformed.
    if claims.max_tokens == 0 || claims.exp <= claims.iat || claims.model.is_empty() {
        return Err(VerifyError::Malformed("claims violate token invariants".into()));
    }

    let now = policy.now().0;
    let leeway = policy.clock_leeway().as_millis() as i64;
    if now >= claims.exp.saturating_mul(1000).saturating_add(leeway) {
        return Err(VerifyError::Expired);
    }
    if now < claims.iat.saturating_mul(1000).saturating_sub(leeway) {
        return Err(VerifyError::NotYetValid);
    }
    Ok(claims)
}
