//! Deterministic stand-in for model inference.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::protocol::{ChatMessage, FinishReason};

const VOCABULARY: &[&str] = &[
    "the", "model", "edge", "token", "backend", "signal", "answer", "short", "lived", "request",
    "provider", "stream", "value", "budget", "device", "secure", "result", "window", "bound",
    "claim", "ledger", "reply", "route", "check", "quiet", "river", "stone", "light", "north",
    "field", "stone", "cloud", "green", "small", "large", "fast", "slow", "data", "frame", "node",
    "sample", "vector", "prompt", "output", "limit", "cache", "clock", "seal", "relay", "path",
    "gate", "call", "trace", "order", "plain", "exact", "mirror", "layer", "index", "range",
    "focus", "level", "point", "unit",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    /// Bounds of the length a prompt naturally produces before any cap.
    pub min_tokens: u32,
    pub max_tokens: u32,
    /// When set, every generation fails as an upstream engine failure.
    #[serde(default)]
    pub unavailable: bool,
}

impl ModelSpec {
    pub fn new(name: impl Into<String>, min_tokens: u32, max_tokens: u32) -> Self {
        ModelSpec {
            name: name.into(),
            min_tokens,
            max_tokens,
            unavailable: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error("model {0:?} is not served")]
    UnknownModel(String),
    #[error("model {0:?} is unavailable")]
    Unavailable(String),
    #[error("generation cap must be at least 1")]
    ZeroCap,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    pub prompt_tokens: u32,
    pub tokens: Vec<String>,
    pub finish_reason: FinishReason,
}

impl Generation {
    pub fn completion_tokens(&self) -> u32 {
        self.tokens.len() as u32
    }

    pub fn content(&self) -> String {
        self.tokens.concat()
    }
}

#[derive(Debug, Clone)]
pub struct MockEngine {
    models: BTreeMap<String, ModelSpec>,
    seed: u64,
}

impl MockEngine {
    pub fn new(models: impl IntoIterator<Item = ModelSpec>, seed: u64) -> Self {
        MockEngine {
            models: models.into_iter().map(|m| (m.name.clone(), m)).collect(),
            seed,
        }
    }

    pub fn serves(&self, model: &str) -> bool {
        self.models.contains_key(model)
    }

    pub fn models(&self) -> impl Iterator<Item = &str> {
        self.models.keys().map(String::as_str)
    }

    fn rng_for(&self, model: &str, prompt: &str) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(model.as_bytes());
        hasher.update([0u8]);
        hasher.update(prompt.as_bytes());
        let seed: [u8; 32] = hasher.finalize().into();
        ChaCha8Rng::from_seed(seed)
    }

    /// Length the model would produce for this prompt with no cap.
    pub fn natural_length(&self, model: &str, messages: &[ChatMessage]) -> Result<u32, EngineError> {
        let spec = self
            .models
            .get(model)
            .ok_or_else(|| EngineError::UnknownModel(model.to_owned()))?;
        let prompt = concat_contents(messages);
        Ok(natural_length(spec, &mut self.rng_for(model, &prompt)))
    }

    pub fn generate(
        &self,
        model: &str,
        messages: &[ChatMessage],
        effective_max: u32,
    ) -> Result<Generation, EngineError> {
        if effective_max == 0 {
            return Err(EngineError::ZeroCap);
        }
        let spec = self
            .models
            .get(model)
            .ok_or_else(|| EngineError::UnknownModel(model.to_owned()))?;
        if spec.unavailable {
            return Err(EngineError::Unavailable(model.to_owned()));
        }
        let prompt = concat_contents(messages);
        let mut rng = self.rng_for(model, &prompt);
        let natural = natural_length(spec, &mut rng);
        let count = natural.min(effective_max);
        let tokens = (0..count)
            .map(|i| {
                let word = VOCABULARY[rng.random_range(0..VOCABULARY.len())];
                if i == 0 {
                    word.to_owned()
                } else {
                    format!(" {word}")
                }
            })
            .collect();
        Ok(Generation {
            prompt_tokens: prompt.split_whitespace().count() as u32,
            tokens,
            finish_reason: if natural > effective_max {
                FinishReason::Length
            } else {
                FinishReason::Stop
            },
        })
    }
}

fn concat_contents(messages: &[ChatMessage]) -> String {
    messages
        .iter()
        .map(|m| m.content.as_str())
        .collect::<Vec<_>>()
        .join("\n")
}

fn natural_length(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> u32 {
    let lo = spec.min_tokens.max(1);
    let hi = spec.max_tokens.max(lo);
    rng.random_range(lo..=hi)
}
