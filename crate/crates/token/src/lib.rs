//! Compact, HMAC-SHA-256 signed invocation tokens.
//!
//! A token is issued by a backend that holds a [`Credential`] (a user-id and
//! secret-key pair provisioned by the model provider). The payload carries the
//! invocation constraints ([`DynasealClaims`]): which model may be called, how
//! many tokens may be generated, and a very short validity window. The
//! provider verifies the MAC with the same secret and enforces the claims.
//!
//! Wire format is the JWS compact serialization:
//!
//! ```text
//! b64url({"alg":"HS256","typ":"JWT"}) "." b64url(claims_json) "." b64url(mac)
//! ```

mod claims;
mod clock;
mod credential;
mod error;
mod token;

pub use claims::{DynasealClaims, DEFAULT_MAX_TTL_SECS};
pub use clock::{Clock, ManualClock, SystemClock, UnixMillis};
pub use credential::{Credential, MIN_SECRET_LEN};
pub use error::{ClaimsError, CredentialError, SignError, VerifyError};
pub use token::{
    hmac_sha256, parse_unverified, sign_token, sign_token_with_max_ttl, verify_token, SignedToken,
    TokenHeader, VerificationPolicy, DEFAULT_CLOCK_LEEWAY_MS, HEADER_JSON, MAX_CLOCK_LEEWAY_MS,
};
