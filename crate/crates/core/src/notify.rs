//! Provider-agnostic push delivery with bounded retries.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::time::{Timestamp, MINUTE_MS};

/// Waits between attempts after a provider failure.
pub const RETRY_BACKOFF_MS: [i64; 3] = [MINUTE_MS, 2 * MINUTE_MS, 4 * MINUTE_MS];

pub const STATUS_OK: &str = "ok";

/// Request body sent to a push provider.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PushNotice {
    pub participant_token: String,
    pub message: String,
    pub rule_id: String,
}

pub trait PushProvider {
    /// One delivery attempt. `Err` carries the provider's failure text.
    fn send(&self, notice: &PushNotice) -> Result<(), String>;
}

impl<P: PushProvider + ?Sized> PushProvider for &P {
    fn send(&self, notice: &PushNotice) -> Result<(), String> {
        (**self).send(notice)
    }
}

/// Injected time source; `sleep` lets simulated clocks jump instead of block.
pub trait Clock {
    fn now(&self) -> Timestamp;
    fn sleep(&self, ms: i64);
}

impl<C: Clock + ?Sized> Clock for &C {
    fn now(&self) -> Timestamp {
        (**self).now()
    }
    fn sleep(&self, ms: i64) {
        (**self).sleep(ms)
    }
}

/// Outcome of one logical dispatch, one line in the dispatch log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DispatchRecord {
    pub rule_id: String,
    pub participant_id: String,
    /// Plan instant for time-based rules.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheduled_for: Option<Timestamp>,
    pub triggered_at: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delivered_at: Option<Timestamp>,
    pub provider_status: String,
    pub attempts: u32,
}

impl DispatchRecord {
    /// Identity used to keep a plan instant from being sent twice.
    pub fn dedup_key(&self) -> (String, String, Timestamp) {
        (
            self.rule_id.clone(),
            self.participant_id.clone(),
            self.scheduled_for.unwrap_or(self.triggered_at),
        )
    }

    pub fn is_ok(&self) -> bool {
        self.provider_status == STATUS_OK
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub delivered_at: Option<Timestamp>,
    pub attempts: u32,
    /// Failure text of every unsuccessful attempt, in order.
    pub failures: Vec<String>,
}

impl Delivery {
    pub fn status(&self) -> String {
        match (&self.delivered_at, self.failures.last()) {
            (Some(_), _) => STATUS_OK.into(),
            (None, Some(last)) => alloc::format!("failed: {last}"),
            (None, None) => "failed".into(),
        }
    }
}

/// Sends `notice`, retrying after each failure per [`RETRY_BACKOFF_MS`].
pub fn deliver<P: PushProvider + ?Sized, C: Clock + ?Sized>(provider: &P, clock: &C, notice: &PushNotice) -> Delivery {
    let mut failures = Vec::new();
    let mut attempts = 0;
    loop {
        attempts += 1;
        match provider.send(notice) {
            Ok(()) => {
                return Delivery {
                    delivered_at: Some(clock.now()),
                    attempts,
                    failures,
                }
            }
            Err(e) => failures.push(e.to_string()),
        }
        match RETRY_BACKOFF_MS.get(failures.len() - 1) {
            Some(&wait) => clock.sleep(wait),
            None => {
                return Delivery {
                    delivered_at: None,
                    attempts,
                    failures,
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::cell::Cell;

    struct FakeClock(Cell<i64>, Cell<u32>);
    impl Clock for FakeClock {
        fn now(&self) -> Timestamp {
            Timestamp::from_millis(self.0.get())
        }
        fn sleep(&self, ms: i64) {
            self.0.set(self.0.get() + ms);
            self.1.set(self.1.get() + 1);
        }
    }

    struct Flaky(Cell<u32>);
    impl PushProvider for Flaky {
        fn send(&self, _: &PushNotice) -> Result<(), String> {
            let left = self.0.get();
            if left == 0 {
                Ok(())
            } else {
                self.0.set(left - 1);
                Err("503".into())
            }
        }
    }

    fn notice() -> PushNotice {
        PushNotice {
            participant_token: "tok".into(),
            message: "hi".into(),
            rule_id: "r".into(),
        }
    }

    #[test]
    fn two_failures_then_success_backs_off_one_then_two_minutes() {
        let clock = FakeClock(Cell::new(0), Cell::new(0));
        let d = deliver(&Flaky(Cell::new(2)), &clock, &notice());
        assert_eq!(d.attempts, 3);
        assert_eq!(d.failures.len(), 2);
        assert_eq!(d.delivered_at, Some(Timestamp::from_millis(3 * MINUTE_MS)));
        assert_eq!(d.status(), "ok");
    }

    #[test]
    fn gives_up_after_three_retries() {
        let clock = FakeClock(Cell::new(0), Cell::new(0));
        let d = deliver(&Flaky(Cell::new(10)), &clock, &notice());
        assert_eq!(d.attempts, 4);
        assert_eq!(clock.1.get(), 3);
        assert_eq!(clock.0.get(), 7 * MINUTE_MS);
        assert_eq!(d.status(), "failed: 503");
    }
}
