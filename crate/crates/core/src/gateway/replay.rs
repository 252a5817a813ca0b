use std::collections::HashMap;
use std::sync::Mutex;

use dynaseal_token::UnixMillis;

/// Seen token ids, each kept until its expiry horizon has passed.
///
/// An entry is only evicted once `now > horizon`; by then the token itself
/// fails the expiry check, so eviction can never re-open a replay.
#[derive(Debug, Default)]
pub struct ReplayCache {
    inner: Mutex<Inner>,
}

#[derive(Debug, Default)]
struct Inner {
    seen: HashMap<String, UnixMillis>,
    last_sweep: i64,
}

const SWEEP_INTERVAL_MS: i64 = 1_000;

impl ReplayCache {
    pub fn new() -> Self {
        ReplayCache::default()
    }

    /// Records `jti` and returns true if it had not been seen before.
    pub fn insert_if_absent(&self, jti: &str, horizon: UnixMillis, now: UnixMillis) -> bool {
        let mut inner = self.inner.lock().unwrap();
        if now.0 - inner.last_sweep >= SWEEP_INTERVAL_MS {
            inner.seen.retain(|_, h| *h >= now);
            inner.last_sweep = now.0;
        }
        if inner.seen.contains_key(jti) {
            return false;
        }
        inner.seen.insert(jti.to_owned(), horizon);
        true
    }

    pub fn sweep(&self, now: UnixMillis) -> usize {
        let mut inner = self.inner.lock().unwrap();
        let before = inner.seen.len();
        inner.seen.retain(|_, h| *h >= now);
        inner.last_sweep = now.0;
        before - inner.seen.len()
    }

    pub fn contains(&self, jti: &str) -> bool {
        self.inner.lock().unwrap().seen.contains_key(jti)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn second_insert_fails() {
        let cache = ReplayCache::new();
        assert!(cache.insert_if_absent("a", UnixMillis(2_000), UnixMillis(0)));
        assert!(!cache.insert_if_absent("a", UnixMillis(2_000), UnixMillis(10)));
        assert!(cache.insert_if_absent("b", UnixMillis(2_000), UnixMillis(10)));
    }

    #[test]
    fn entries_survive_until_horizon() {
        let cache = ReplayCache::new();
        cache.insert_if_absent("a", UnixMillis(2_000), UnixMillis(0));
        assert_eq!(cache.sweep(UnixMillis(2_000)), 0);
        assert!(cache.contains("a"));
        assert_eq!(cache.sweep(UnixMillis(2_001)), 1);
        assert!(cache.is_empty());
    }

    #[test]
    fn concurrent_inserts_admit_exactly_one() {
        let cache = Arc::new(ReplayCache::new());
        let wins: usize = std::thread::scope(|s| {
            let handles: Vec<_> = (0..64)
                .map(|_| {
                    let cache = cache.clone();
                    s.spawn(move || cache.insert_if_absent("j", UnixMillis(9_000), UnixMillis(1)) as usize)
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).sum()
        });
        assert_eq!(wins, 1);
    }
}
