//! Best-effort delivery of completion callbacks to the issuing backend.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tokio::sync::Notify;

use crate::net::HttpClient;
use crate::protocol::{CallbackNotification, CALLBACK_AUTH_HEADER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Delay before the first retry; doubles for each further retry.
    pub base_delay_ms: u64,
    pub max_retries: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            base_delay_ms: 200,
            max_retries: 3,
        }
    }
}

impl RetryPolicy {
    pub fn delay_before_retry(&self, retry: u32) -> Duration {
        Duration::from_millis(self.base_delay_ms.saturating_mul(1 << retry.min(16)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum DeliveryOutcome {
    Delivered { attempts: u32 },
    /// The backend answered with a 4xx; retrying would not help.
    Rejected { attempts: u32, status: u16 },
    GaveUp { attempts: u32, last_error: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DeliveryRecord {
    pub jti: String,
    pub url: String,
    #[serde(flatten)]
    pub outcome: DeliveryOutcome,
}

#[derive(Debug)]
pub struct CallbackDispatcher {
    client: HttpClient,
    secret: String,
    retry: RetryPolicy,
    log: Mutex<Vec<DeliveryRecord>>,
    pending: AtomicUsize,
    idle: Notify,
}

impl CallbackDispatcher {
    pub fn new(client: HttpClient, secret: impl Into<String>, retry: RetryPolicy) -> Self {
        CallbackDispatcher {
            client,
            secret: secret.into(),
            retry,
            log: Mutex::new(Vec::new()),
            pending: AtomicUsize::new(0),
            idle: Notify::new(),
        }
    }

    /// Posts the notification, retrying on transport failures and 5xx.
    pub async fn deliver(&self, url: &str, notification: &CallbackNotification) -> DeliveryOutcome {
        let headers = [(CALLBACK_AUTH_HEADER, self.secret.as_str())];
        let mut attempts = 0;
        loop {
            attempts += 1;
            let last_error = match self.client.post_json(url, &headers, notification).await {
                Ok(resp) => {
                    let status = resp.status;
                    let _ = resp.bytes().await;
                    if status.is_success() {
                        return DeliveryOutcome::Delivered { attempts };
                    }
                    if status.is_client_error() {
                        return DeliveryOutcome::Rejected {
                            attempts,
                            status: status.as_u16(),
                        };
                    }
                    format!("status {status}")
                }
                Err(e) => e.to_string(),
            };
            let retry = attempts - 1;
            if retry >= self.retry.max_retries {
                return DeliveryOutcome::GaveUp { attempts, last_error };
            }
            tokio::time::sleep(self.retry.delay_before_retry(retry)).await;
        }
    }

    /// Delivers in the background. Never blocks the caller.
    pub fn spawn(self: &Arc<Self>, url: String, notification: CallbackNotification) {
        self.ticket().dispatch(url, notification);
    }

    /// Counts a delivery as pending before its notification exists, so
    /// [`wait_idle`](Self::wait_idle) cannot miss a response that is still
    /// being produced.
    pub fn ticket(self: &Arc<Self>) -> CallbackTicket {
        self.pending.fetch_add(1, Ordering::SeqCst);
        CallbackTicket {
            dispatcher: Some(self.clone()),
        }
    }

    fn finish_one(&self) {
        if self.pending.fetch_sub(1, Ordering::SeqCst) == 1 {
            self.idle.notify_waiters();
        }
    }

    pub fn pending(&self) -> usize {
        self.pending.load(Ordering::SeqCst)
    }

    /// Resolves once no deliveries are in flight.
    pub async fn wait_idle(&self) {
        loop {
            let notified = self.idle.notified();
            tokio::pin!(notified);
            notified.as_mut().enable();
            if self.pending() == 0 {
                return;
            }
            notified.await;
        }
    }

    pub fn log(&self) -> Vec<DeliveryRecord> {
        self.log.lock().unwrap().clone()
    }
}

/// A reserved delivery slot. Dropping it without dispatching releases it.
#[derive(Debug)]
pub struct CallbackTicket {
    dispatcher: Option<Arc<CallbackDispatcher>>,
}

impl CallbackTicket {
    pub fn dispatch(mut self, url: String, notification: CallbackNotification) {
        let this = self.dispatcher.take().expect("ticket used once");
        tokio::spawn(async move {
            let outcome = this.deliver(&url, &notification).await;
            match &outcome {
                DeliveryOutcome::Delivered { attempts } => {
                    tracing::info!(jti = %notification.jti, attempts, "callback delivered")
                }
                other => tracing::warn!(jti = %notification.jti, outcome = ?other, "callback not delivered"),
            }
            this.log.lock().unwrap().push(DeliveryRecord {
                jti: notification.jti,
                url,
                outcome,
            });
            this.finish_one();
        });
    }
}

impl Drop for CallbackTicket {
    fn drop(&mut self) {
        if let Some(d) = self.dispatcher.take() {
            d.finish_one();
        }
    }
}
