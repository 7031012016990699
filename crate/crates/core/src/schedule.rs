//! Notification rules: daily plans for time-based reminders and threshold
//! evaluation for condition-based ones.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use chrono::{Duration, LocalResult, NaiveDate, NaiveDateTime, NaiveTime, TimeZone};
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fusion::SensorReading;
use crate::time::{Timestamp, HOUR_MS, MINUTE_MS};

/// Maximum deviation from the nominal slot centre, as a fraction of the slot.
pub const JITTER_FRACTION: f64 = 0.10;

/// A self-reported location is trusted for this long.
pub const PRESENCE_TTL_MS: i64 = 2 * HOUR_MS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Direction {
    Above,
    Below,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ScheduledSpec {
    pub times_per_day: u32,
    pub waking_start: NaiveTime,
    pub waking_end: NaiveTime,
    /// IANA zone name, resolved by the caller.
    pub timezone: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ConditionalSpec {
    pub location_label: String,
    pub temp_threshold_c: f64,
    pub direction: Direction,
    #[serde(default)]
    pub cooldown_minutes: u32,
}

impl ConditionalSpec {
    pub fn crosses(&self, temperature_c: f64) -> bool {
        match self.direction {
            Direction::Above => temperature_c > self.temp_threshold_c,
            Direction::Below => temperature_c < self.temp_threshold_c,
        }
    }

    pub fn cooldown_ms(&self) -> i64 {
        i64::from(self.cooldown_minutes) * MINUTE_MS
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase")]
pub enum RuleTrigger {
    Scheduled(ScheduledSpec),
    Conditional(ConditionalSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct NotificationRule {
    pub rule_id: String,
    #[serde(flatten)]
    pub trigger: RuleTrigger,
    pub message: String,
    #[serde(default = "enabled_by_default")]
    pub enabled: bool,
}

fn enabled_by_default() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScheduleError {
    #[error("rule {rule}: {reason}")]
    InvalidRule { rule: String, reason: &'static str },
    #[error("rule {0} has an empty waking window on this date")]
    EmptyWindow(String),
}

impl NotificationRule {
    pub fn validate(&self) -> Result<(), ScheduleError> {
        let invalid = |reason| ScheduleError::InvalidRule {
            rule: self.rule_id.clone(),
            reason,
        };
        if self.rule_id.trim().is_empty() {
            return Err(invalid("empty ruleId"));
        }
        match &self.trigger {
            RuleTrigger::Scheduled(s) => {
                if s.times_per_day == 0 {
                    return Err(invalid("timesPerDay must be at least 1"));
                }
                if s.waking_start >= s.waking_end {
                    return Err(invalid("wakingStart must precede wakingEnd"));
                }
            }
            RuleTrigger::Conditional(c) => {
                if c.location_label.trim().is_empty() {
                    return Err(invalid("empty locationLabel"));
                }
                if !c.temp_threshold_c.is_finite() {
                    return Err(invalid("threshold must be finite"));
                }
            }
        }
        Ok(())
    }

    pub fn scheduled(&self) -> Option<&ScheduledSpec> {
        match &self.trigger {
            RuleTrigger::Scheduled(s) => Some(s),
            RuleTrigger::Conditional(_) => None,
        }
    }

    pub fn conditional(&self) -> Option<&ConditionalSpec> {
        match &self.trigger {
            RuleTrigger::Conditional(c) => Some(c),
            RuleTrigger::Scheduled(_) => None,
        }
    }
}

/// Deterministic jitter source for one participant-day.
pub fn plan_rng(participant_id: &str, date: NaiveDate) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(b"plan-day\0");
    hasher.update(participant_id.as_bytes());
    hasher.update([0u8]);
    hasher.update(itoa_date(date));
    ChaCha8Rng::from_seed(hasher.finalize().into())
}

fn itoa_date(date: NaiveDate) -> [u8; 10] {
    use chrono::Datelike;
    let mut out = [b'0'; 10];
    let y = date.year().rem_euclid(10_000) as u32;
    let digits = [
        y / 1000,
        (y / 100) % 10,
        (y / 10) % 10,
        y % 10,
        10,
        date.month() / 10,
        date.month() % 10,
        10,
        date.day() / 10,
        date.day() % 10,
    ];
    for (slot, d) in out.iter_mut().zip(digits) {
        *slot = if d == 10 { b'-' } else { b'0' + d as u8 };
    }
    out
}

/// Uniform in `[0, 1)` from 53 random bits.
fn unit_interval(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

/// First valid instant at or after a local wall-clock time (gaps skip forward).
fn resolve_forward<Tz: TimeZone>(tz: &Tz, local: NaiveDateTime) -> Option<Timestamp> {
    (0..=24 * 60).find_map(|m| match tz.from_local_datetime(&(local + Duration::minutes(m))) {
        LocalResult::Single(t) => Some(Timestamp::from_datetime(&t)),
        // Repeated hour: the later occurrence.
        LocalResult::Ambiguous(_, late) => Some(Timestamp::from_datetime(&late)),
        LocalResult::None => None,
    })
}

/// Last valid instant at or before a local wall-clock time (gaps skip back).
fn resolve_backward<Tz: TimeZone>(tz: &Tz, local: NaiveDateTime) -> Option<Timestamp> {
    (0..=24 * 60).find_map(|m| match tz.from_local_datetime(&(local - Duration::minutes(m))) {
        LocalResult::Single(t) => Some(Timestamp::from_datetime(&t)),
        LocalResult::Ambiguous(early, _) => Some(Timestamp::from_datetime(&early)),
        LocalResult::None => None,
    })
}

/// `times_per_day` instants for `date` in the rule's zone, one per equal slot
/// of the waking window, each at its slot centre shifted by up to
/// ±[`JITTER_FRACTION`] of a slot. Deterministic in `(participant_id, date)`.
pub fn plan_day<Tz: TimeZone>(
    rule: &NotificationRule,
    date: NaiveDate,
    participant_id: &str,
    tz: &Tz,
) -> Result<Vec<Timestamp>, ScheduleError> {
    rule.validate()?;
    let spec = rule.scheduled().ok_or_else(|| ScheduleError::InvalidRule {
        rule: rule.rule_id.clone(),
        reason: "not a scheduled rule",
    })?;
    if !rule.enabled {
        return Err(ScheduleError::InvalidRule {
            rule: rule.rule_id.clone(),
            reason: "rule is disabled",
        });
    }
    let empty = || ScheduleError::EmptyWindow(rule.rule_id.clone());
    let start = resolve_forward(tz, date.and_time(spec.waking_start)).ok_or_else(empty)?;
    let end = resolve_backward(tz, date.and_time(spec.waking_end)).ok_or_else(empty)?;
    let span = end.millis_since(start);
    if span <= 0 {
        return Err(empty());
    }

    let n = spec.times_per_day;
    let slot = span as f64 / f64::from(n);
    let mut rng = plan_rng(participant_id, date);
    Ok((0..n)
        .map(|i| {
            let centre = slot * (f64::from(i) + 0.5);
            let jitter = (2.0 * unit_interval(&mut rng) - 1.0) * JITTER_FRACTION * slot;
            let offset = libm::round(centre + jitter) as i64;
            start.plus_millis(offset.clamp(0, span))
        })
        .collect())
}

/// Last dispatch time per (rule, participant).
#[derive(Debug, Clone, Default)]
pub struct CooldownLedger {
    last: BTreeMap<(String, String), Timestamp>,
}

impl CooldownLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, rule_id: &str, participant_id: &str, at: Timestamp) {
        let entry = self
            .last
            .entry((rule_id.into(), participant_id.into()))
            .or_insert(at);
        if at > *entry {
            *entry = at;
        }
    }

    pub fn last(&self, rule_id: &str, participant_id: &str) -> Option<Timestamp> {
        self.last
            .get(&(String::from(rule_id), String::from(participant_id)))
            .copied()
    }

    fn cooling(&self, rule_id: &str, participant_id: &str, now: Timestamp, cooldown_ms: i64) -> bool {
        self.last(rule_id, participant_id)
            .is_some_and(|last| now.millis_since(last) < cooldown_ms)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalTrigger {
    pub rule_id: String,
    pub participant_id: String,
    pub triggered_at: Timestamp,
    pub reading: SensorReading,
}

/// Participants present at the rule's location whose latest reading is past
/// the threshold, minus those still cooling down. Triggers are recorded in
/// `ledger`. Disabled and scheduled rules yield nothing.
pub fn evaluate_conditional(
    rule: &NotificationRule,
    latest_by_location: &BTreeMap<String, SensorReading>,
    presence: &BTreeMap<String, String>,
    now: Timestamp,
    ledger: &mut CooldownLedger,
) -> Vec<ConditionalTrigger> {
    let Some(spec) = rule.conditional().filter(|_| rule.enabled) else {
        return Vec::new();
    };
    let Some(reading) = latest_by_location
        .get(&spec.location_label)
        .filter(|r| spec.crosses(r.dry_bulb_temp_c))
    else {
        return Vec::new();
    };
    let mut fired = Vec::new();
    for (participant, location) in presence {
        if *location != spec.location_label
            || ledger.cooling(&rule.rule_id, participant, now, spec.cooldown_ms())
        {
            continue;
        }
        ledger.record(&rule.rule_id, participant, now);
        fired.push(ConditionalTrigger {
            rule_id: rule.rule_id.clone(),
            participant_id: participant.clone(),
            triggered_at: now,
            reading: reading.clone(),
        });
    }
    fired
}

/// Where each participant last said they were.
#[derive(Debug, Clone, Default)]
pub struct PresenceTracker {
    latest: BTreeMap<String, (Timestamp, String)>,
}

impl PresenceTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn observe(&mut self, participant_id: &str, at: Timestamp, location: &str) {
        match self.latest.get(participant_id) {
            Some((seen, _)) if *seen > at => {}
            _ => {
                self.latest
                    .insert(participant_id.into(), (at, location.into()));
            }
        }
    }

    /// Participant to location, dropping reports older than [`PRESENCE_TTL_MS`]
    /// or newer than `now`.
    pub fn present_at(&self, now: Timestamp) -> BTreeMap<String, String> {
        self.latest
            .iter()
            .filter(|(_, (at, _))| *at <= now && now.millis_since(*at) <= PRESENCE_TTL_MS)
            .map(|(p, (_, loc))| (p.clone(), loc.clone()))
            .collect()
    }
}
