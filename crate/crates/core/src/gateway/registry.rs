use std::collections::{BTreeSet, HashMap};

use dynaseal_token::Credential;
use subtle::ConstantTimeEq;

/// Optional restriction of a credential to a set of model names.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ModelScope(Option<BTreeSet<String>>);

impl ModelScope {
    pub fn any() -> Self {
        ModelScope(None)
    }

    pub fn only<I, S>(models: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ModelScope(Some(models.into_iter().map(Into::into).collect()))
    }

    pub fn from_option(models: Option<Vec<String>>) -> Self {
        ModelScope(models.map(|m| m.into_iter().collect()))
    }

    pub fn permits(&self, model: &str) -> bool {
        self.0.as_ref().is_none_or(|set| set.contains(model))
    }
}

#[derive(Debug, Clone)]
pub struct RegistryEntry {
    pub credential: Credential,
    pub scope: ModelScope,
}

#[derive(Debug, Clone)]
pub struct StaticKey {
    pub key: String,
    pub label: String,
    pub scope: ModelScope,
}

/// Provider-side record of every credential it has handed out: signing
/// kv-pairs for token issuers and, for the baseline modes, long-lived keys.
#[derive(Debug, Clone, Default)]
pub struct KeyRegistry {
    issuers: HashMap<String, RegistryEntry>,
    static_keys: Vec<StaticKey>,
}

impl KeyRegistry {
    pub fn new() -> Self {
        KeyRegistry::default()
    }

    pub fn add_issuer(&mut self, credential: Credential, scope: ModelScope) {
        self.issuers.insert(
            credential.user_id().to_owned(),
            RegistryEntry { credential, scope },
        );
    }

    pub fn add_static_key(&mut self, key: impl Into<String>, label: impl Into<String>, scope: ModelScope) {
        self.static_keys.push(StaticKey {
            key: key.into(),
            label: label.into(),
            scope,
        });
    }

    /// Unknown ids yield `None`; callers must treat that as a rejection.
    pub fn issuer(&self, user_id: &str) -> Option<&RegistryEntry> {
        self.issuers.get(user_id)
    }

    pub fn static_key(&self, presented: &str) -> Option<&StaticKey> {
        let mut found = None;
        for candidate in &self.static_keys {
            if bool::from(candidate.key.as_bytes().ct_eq(presented.as_bytes())) {
                found = Some(candidate);
            }
        }
        found
    }

    pub fn issuer_count(&self) -> usize {
        self.issuers.len()
    }

    pub fn static_key_count(&self) -> usize {
        self.static_keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.issuers.is_empty() && self.static_keys.is_empty()
    }
}
