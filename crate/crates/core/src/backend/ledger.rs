//! Request lifecycle ledger: an append-only JSON-lines journal with an
//! in-memory index rebuilt from it on open.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use dynaseal_token::UnixMillis;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::protocol::{CallbackNotification, FinishReason, Usage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum LedgerState {
    Issued,
    Completed,
    Expired,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub jti: String,
    pub device_id: String,
    pub model: String,
    pub max_tokens: u32,
    /// Unix milliseconds.
    pub issued_at: i64,
    /// Unix seconds, as in the token.
    pub exp: i64,
    pub state: LedgerState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<Usage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finish_reason: Option<FinishReason>,
    /// Hex SHA-256 of the reported response content.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_digest: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Event {
    Issued {
        jti: String,
        device_id: String,
        model: String,
        max_tokens: u32,
        issued_at: i64,
        exp: i64,
    },
    Completed {
        jti: String,
        usage: Usage,
        finish_reason: FinishReason,
        response_digest: String,
        completed_at: i64,
    },
    Expired {
        jti: String,
        at: i64,
    },
}

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("unknown jti {0:?}")]
    UnknownJti(String),
    #[error("jti {jti:?} is {state:?}; {detail}")]
    StateConflict {
        jti: String,
        state: LedgerState,
        detail: String,
    },
    #[error("invalid notification: {0}")]
    InvalidNotification(String),
    #[error("duplicate jti {0:?}")]
    DuplicateJti(String),
    #[error("journal {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("journal {path} line {line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompletionOutcome {
    Completed,
    /// Same notification seen before; nothing changed.
    Duplicate,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateCounts {
    pub issued: usize,
    pub completed: usize,
    pub expired: usize,
}

impl StateCounts {
    pub fn total(&self) -> usize {
        self.issued + self.completed + self.expired
    }
}

#[derive(Debug)]
struct Journal {
    path: PathBuf,
    file: File,
}

#[derive(Debug, Default)]
struct Inner {
    entries: HashMap<String, LedgerEntry>,
    journal: Option<Journal>,
}

#[derive(Debug, Default)]
pub struct Ledger {
    inner: Mutex<Inner>,
}

pub fn response_digest(content: &str) -> String {
    hex::encode(Sha256::digest(content.as_bytes()))
}

impl Ledger {
    /// A ledger kept only in memory.
    pub fn in_memory() -> Self {
        Ledger::default()
    }

    /// Opens (or creates) a journal and replays it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, LedgerError> {
        let path = path.as_ref().to_owned();
        let io_err = |source| LedgerError::Io {
            path: path.clone(),
            source,
        };
        let mut inner = Inner::default();
        if path.exists() {
            let reader = BufReader::new(File::open(&path).map_err(io_err)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line.map_err(io_err)?;
                if line.trim().is_empty() {
                    continue;
                }
                let corrupt = |message: String| LedgerError::Corrupt {
                    path: path.clone(),
                    line: i + 1,
                    message,
                };
                let event: Event = serde_json::from_str(&line).map_err(|e| corrupt(e.to_string()))?;
                inner.apply(event).map_err(|e| corrupt(e.to_string()))?;
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err)?;
        inner.journal = Some(Journal { path, file });
        Ok(Ledger {
            inner: Mutex::new(inner),
        })
    }

    pub fn record_issued(
        &self,
        jti: &str,
        device_id: &str,
        model: &str,
        max_tokens: u32,
        issued_at: UnixMillis,
        exp: i64,
    ) -> Result<(), LedgerError> {
        let mut inner = self.inner.lock().unwrap();
        if inner.entries.contains_key(jti) {
            return Err(LedgerError::DuplicateJti(jti.to_owned()));
        }
        inner.commit(Event::Issued {
            jti: jti.to_owned(),
            device_id: device_id.to_owned(),
            model: model.to_owned(),
            max_tokens,
            issued_at: issued_at.0,
            exp,
        })
    }

    /// Applies a completion callback. Check and update happen under one lock.
    pub fn complete(&self, n: &CallbackNotification) -> Result<CompletionOutcome, LedgerError> {
        let digest = response_digest(&n.response_content);
        let mut inner = self.inner.lock().unwrap();
        let entry = inner
            .entries
            .get(&n.jti)
            .ok_or_else(|| LedgerError::UnknownJti(n.jti.clone()))?;
        match entry.state {
            LedgerState::Completed => {
                if entry.usage == Some(n.usage)
                    && entry.finish_reason == Some(n.finish_reason)
                    && entry.response_digest.as_deref() == Some(digest.as_str())
                {
                    Ok(CompletionOutcome::Duplicate)
                } else {
                    Err(LedgerError::StateConflict {
                        jti: n.jti.clone(),
                        state: entry.state,
                        detail: "a different completion was already recorded".into(),
                    })
                }
            }
            LedgerState::Expired => Err(LedgerError::StateConflict {
                jti: n.jti.clone(),
                state: entry.state,
                detail: "entry already expired".into(),
            }),
            LedgerState::Issued => {
                if n.model != entry.model {
                    return Err(LedgerError::InvalidNotification(format!(
                        "model {:?} differs from issued model {:?}",
                        n.model, entry.model
                    )));
                }
                if n.usage.completion_tokens > entry.max_tokens {
                    return Err(LedgerError::InvalidNotification(format!(
                        "completion_tokens {} exceeds max_tokens {}",
                        n.usage.completion_tokens, entry.max_tokens
                    )));
                }
                inner.commit(Event::Completed {
                    jti: n.jti.clone(),
                    usage: n.usage,
                    finish_reason: n.finish_reason,
                    response_digest: digest,
                    completed_at: n.completed_at,
                })?;
                Ok(CompletionOutcome::Completed)
            }
        }
    }

    /// Moves every ISSUED entry whose `exp + grace` lies before `now` to EXPIRED.
    pub fn sweep_expired(&self, now: UnixMillis, grace_ms: i64) -> Result<usize, LedgerError> {
        let mut inner = self.inner.lock().unwrap();
        let mut due: Vec<String> = inner
            .entries
            .values()
            .filter(|e| e.state == LedgerState::Issued && e.exp * 1000 + grace_ms < now.0)
            .map(|e| e.jti.clone())
            .collect();
        due.sort();
        for jti in &due {
            inner.commit(Event::Expired {
                jti: jti.clone(),
                at: now.0,
            })?;
        }
        Ok(due.len())
    }

    pub fn get(&self, jti: &str) -> Option<LedgerEntry> {
        self.inner.lock().unwrap().entries.get(jti).cloned()
    }

    /// All entries ordered by issue time, then jti.
    pub fn entries(&self) -> Vec<LedgerEntry> {
        let mut all: Vec<_> = self.inner.lock().unwrap().entries.values().cloned().collect();
        all.sort_by(|a, b| (a.issued_at, &a.jti).cmp(&(b.issued_at, &b.jti)));
        all
    }

    pub fn counts(&self) -> StateCounts {
        let inner = self.inner.lock().unwrap();
        let mut c = StateCounts::default();
        for e in inner.entries.values() {
            match e.state {
                LedgerState::Issued => c.issued += 1,
                LedgerState::Completed => c.completed += 1,
                LedgerState::Expired => c.expired += 1,
            }
        }
        c
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Inner {
    /// Journal first, then memory, so a failed write changes nothing.
    fn commit(&mut self, event: Event) -> Result<(), LedgerError> {
        if let Some(journal) = &mut self.journal {
            let mut line = serde_json::to_vec(&event).expect("events serialize");
            line.push(b'\n');
            journal
                .file
                .write_all(&line)
                .and_then(|_| journal.file.flush())
                .map_err(|source| LedgerError::Io {
                    path: journal.path.clone(),
                    source,
                })?;
        }
        self.apply(event).expect("event validated before commit");
        Ok(())
    }

    fn apply(&mut self, event: Event) -> Result<(), String> {
        match event {
            Event::Issued {
                jti,
                device_id,
                model,
                max_tokens,
                issued_at,
                exp,
            } => {
                if self.entries.contains_key(&jti) {
                    return Err(format!("jti {jti:?} issued twice"));
                }
                self.entries.insert(
                    jti.clone(),
                    LedgerEntry {
                        jti,
                        device_id,
                        model,
                        max_tokens,
                        issued_at,
                        exp,
                        state: LedgerState::Issued,
                        usage: None,
                        finish_reason: None,
                        response_digest: None,
                    },
                );
            }
            Event::Completed {
                jti,
                usage,
                finish_reason,
                response_digest,
                ..
            } => {
                let entry = self.issued_entry(&jti)?;
                entry.state = LedgerState::Completed;
                entry.usage = Some(usage);
                entry.finish_reason = Some(finish_reason);
                entry.response_digest = Some(response_digest);
            }
            Event::Expired { jti, .. } => {
                self.issued_entry(&jti)?.state = LedgerState::Expired;
            }
        }
        Ok(())
    }

    fn issued_entry(&mut self, jti: &str) -> Result<&mut LedgerEntry, String> {
        match self.entries.get_mut(jti) {
            Some(e) if e.state == LedgerState::Issued => Ok(e),
            Some(e) => Err(format!("jti {jti:?} is already {:?}", e.state)),
            None => Err(format!("jti {jti:?} was never issued")),
        }
    }
}
