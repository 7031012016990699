//! Per-key sliding-window admission.
//!
//! A request at `now` is admitted iff fewer than `limit` earlier admissions
//! fall in the half-open window `(now - 60 min, now]`. Denied requests do not
//! count against the window. Time never runs backwards for a key: a request
//! stamped earlier than one already seen is judged at the latest time seen.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::string::String;

use thiserror::Error;

use crate::time::{Timestamp, HOUR_MS};

pub const WINDOW_MS: i64 = HOUR_MS;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Allow,
    Deny,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RateLimitError {
    #[error("unknown API key {0:?}")]
    UnknownKey(String),
}

#[derive(Debug, Clone)]
pub struct SlidingWindow {
    limit: u32,
    admitted: VecDeque<Timestamp>,
    latest: Option<Timestamp>,
}

impl SlidingWindow {
    pub fn new(limit: u32) -> Self {
        SlidingWindow {
            limit,
            admitted: VecDeque::new(),
            latest: None,
        }
    }

    pub fn limit(&self) -> u32 {
        self.limit
    }

    /// Decides and, on `Allow`, records the request.
    pub fn check(&mut self, now: Timestamp) -> Decision {
        let now = match self.latest {
            Some(latest) if latest > now => latest,
            _ => now,
        };
        self.latest = Some(now);
        let horizon = now.plus_millis(-WINDOW_MS);
        while self.admitted.front().is_some_and(|&t| t <= horizon) {
            self.admitted.pop_front();
        }
        if (self.admitted.len() as u64) < u64::from(self.limit) {
            self.admitted.push_back(now);
            Decision::Allow
        } else {
            Decision::Deny
        }
    }

    /// Admissions currently inside the window ending at the latest time seen.
    pub fn in_window(&self) -> usize {
        self.admitted.len()
    }
}

/// Windows for a fixed set of keys.
#[derive(Debug, Clone, Default)]
pub struct RateLimiter {
    windows: BTreeMap<String, SlidingWindow>,
}

impl RateLimiter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, key_id: impl Into<String>, rate_per_hour: u32) {
        self.windows
            .insert(key_id.into(), SlidingWindow::new(rate_per_hour));
    }

    pub fn check(&mut self, key_id: &str, now: Timestamp) -> Result<Decision, RateLimitError> {
        self.windows
            .get_mut(key_id)
            .map(|w| w.check(now))
            .ok_or_else(|| RateLimitError::UnknownKey(key_id.into()))
    }
}
