//! Notification runtime: clocks, push providers, the dispatch log and the
//! scheduler loop that turns rules into deliveries.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicI64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread;
use std::time::Duration;

use chrono::{NaiveDate, TimeZone, Utc};
use chrono_tz::Tz;
use ema_core::fusion::{latest_by_location, SensorReading, DEFAULT_LOCATION_KEY};
use ema_core::notify::{deliver, Clock, DispatchRecord, PushNotice, PushProvider};
use ema_core::schedule::{
    evaluate_conditional, plan_day, CooldownLedger, NotificationRule, PresenceTracker,
    ScheduleError, PRESENCE_TTL_MS,
};
use ema_core::time::MINUTE_MS;
use ema_core::{ResponsePayload, Timestamp};
use thiserror::Error;

use crate::registry::Registry;
use crate::store::{Store, Stream};

pub const STATUS_NO_PUSH_TOKEN: &str = "noPushToken";
/// How late a planned instant may still be sent after a pause or restart.
pub const DEFAULT_GRACE_MS: i64 = 10 * MINUTE_MS;

pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        Timestamp::from_millis(Utc::now().timestamp_millis())
    }

    fn sleep(&self, ms: i64) {
        thread::sleep(Duration::from_millis(ms.max(0) as u64));
    }
}

/// Simulated clock; `sleep` jumps forward instantly.
#[derive(Debug)]
pub struct ManualClock(AtomicI64);

impl ManualClock {
    pub fn new(start: Timestamp) -> Self {
        ManualClock(AtomicI64::new(start.as_millis()))
    }

    pub fn set(&self, t: Timestamp) {
        self.0.store(t.as_millis(), Ordering::SeqCst);
    }

    pub fn advance(&self, ms: i64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Timestamp {
        Timestamp::from_millis(self.0.load(Ordering::SeqCst))
    }

    fn sleep(&self, ms: i64) {
        self.advance(ms);
    }
}

/// Accepts everything and writes a log line.
pub struct LogProvider;

impl PushProvider for LogProvider {
    fn send(&self, notice: &PushNotice) -> Result<(), String> {
        tracing::info!(rule = %notice.rule_id, message = %notice.message, "push notification");
        Ok(())
    }
}

/// POSTs `{participantToken, message, ruleId}` to a fixed URL; any non-2xx
/// status is a failure.
pub struct WebhookProvider {
    url: String,
    client: reqwest::blocking::Client,
}

impl WebhookProvider {
    pub fn new(url: &str) -> Result<Self, String> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(10))
            .build()
            .map_err(|e| e.to_string())?;
        Ok(WebhookProvider {
            url: url.into(),
            client,
        })
    }
}

impl PushProvider for WebhookProvider {
    fn send(&self, notice: &PushNotice) -> Result<(), String> {
        let resp = self
            .client
            .post(&self.url)
            .json(notice)
            .send()
            .map_err(|e| e.to_string())?;
        if resp.status().is_success() {
            Ok(())
        } else {
            Err(format!("HTTP {}", resp.status().as_u16()))
        }
    }
}

/// Where dispatch records go and are recovered from.
pub trait DispatchLog: Send + Sync {
    fn load(&self) -> Result<Vec<DispatchRecord>, String>;
    fn append(&self, record: &DispatchRecord) -> Result<(), String>;
}

impl DispatchLog for Store {
    fn load(&self) -> Result<Vec<DispatchRecord>, String> {
        self.scan(Stream::Dispatches)
            .map_err(|e| e.to_string())?
            .into_iter()
            .map(|r| serde_json::from_value(r.body).map_err(|e| e.to_string()))
            .collect()
    }

    fn append(&self, record: &DispatchRecord) -> Result<(), String> {
        let body = serde_json::to_value(record).expect("dispatch records serialize");
        Store::append(self, Stream::Dispatches, record.triggered_at, body)
            .map(drop)
            .map_err(|e| e.to_string())
    }
}

#[derive(Debug, Default)]
pub struct MemoryLog(pub Mutex<Vec<DispatchRecord>>);

impl DispatchLog for MemoryLog {
    fn load(&self) -> Result<Vec<DispatchRecord>, String> {
        Ok(self.0.lock().unwrap().clone())
    }

    fn append(&self, record: &DispatchRecord) -> Result<(), String> {
        self.0.lock().unwrap().push(record.clone());
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Recipient {
    pub participant_id: String,
    pub push_token: Option<String>,
}

/// Who may be notified.
pub trait Roster: Send + Sync {
    fn recipients(&self) -> Vec<Recipient>;
}

impl Roster for Registry {
    /// Consented participants only.
    fn recipients(&self) -> Vec<Recipient> {
        self.participants()
            .into_iter()
            .filter(|p| p.has_consented())
            .map(|p| Recipient {
                participant_id: p.random_id.to_string(),
                push_token: p.push_token,
            })
            .collect()
    }
}

impl Roster for Vec<Recipient> {
    fn recipients(&self) -> Vec<Recipient> {
        self.clone()
    }
}

/// Sensor readings and self-reported locations in a time range.
pub trait Observations: Send + Sync {
    fn readings(&self, from: Timestamp, to: Timestamp) -> Vec<SensorReading>;
    /// `(reported at, participant, location answer)`.
    fn location_reports(&self, from: Timestamp, to: Timestamp) -> Vec<(Timestamp, String, String)>;
}

fn report_of(p: &ResponsePayload) -> Option<(Timestamp, String, String)> {
    p.answer(DEFAULT_LOCATION_KEY)
        .map(|loc| (p.submitted_at, p.participant_id.clone(), loc.to_owned()))
}

impl Observations for Store {
    fn readings(&self, from: Timestamp, to: Timestamp) -> Vec<SensorReading> {
        self.query_range(Stream::Sensor, from, to, None)
            .unwrap_or_default()
            .into_iter()
            .filter_map(|r| serde_json::from_value(r.body).ok())
            .collect()
    }

    fn location_reports(&self, from: Timestamp, to: Timestamp) -> Vec<(Timestamp, String, String)> {
        self.query_range(Stream::Responses, from, to, None)
            .unwrap_or_default()
            .into_iter()
            .filter_map(|r| serde_json::from_value::<ResponsePayload>(r.body).ok())
            .filter_map(|p| report_of(&p))
            .collect()
    }
}

/// Fixed observation set for simulations.
#[derive(Debug, Clone, Default)]
pub struct MemoryObservations {
    pub readings: Vec<SensorReading>,
    pub reports: Vec<(Timestamp, String, String)>,
}

impl Observations for MemoryObservations {
    fn readings(&self, from: Timestamp, to: Timestamp) -> Vec<SensorReading> {
        self.readings
            .iter()
            .filter(|r| r.timestamp >= from && r.timestamp < to)
            .cloned()
            .collect()
    }

    fn location_reports(&self, from: Timestamp, to: Timestamp) -> Vec<(Timestamp, String, String)> {
        self.reports
            .iter()
            .filter(|(t, _, _)| *t >= from && *t < to)
            .cloned()
            .collect()
    }
}

#[derive(Debug, Error)]
pub enum RulesError {
    #[error("cannot read rules: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid rules file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Invalid(#[from] ScheduleError),
    #[error("rule {rule:?}: unknown timezone {zone:?}")]
    UnknownTimezone { rule: String, zone: String },
    #[error("duplicate rule id {0:?}")]
    Duplicate(String),
}

/// A validated rule with its zone resolved.
#[derive(Debug, Clone)]
pub struct LoadedRule {
    pub rule: NotificationRule,
    pub tz: Option<Tz>,
}

pub fn prepare_rules(rules: Vec<NotificationRule>) -> Result<Vec<LoadedRule>, RulesError> {
    let mut out: Vec<LoadedRule> = Vec::with_capacity(rules.len());
    for rule in rules {
        rule.validate()?;
        if out.iter().any(|r| r.rule.rule_id == rule.rule_id) {
            return Err(RulesError::Duplicate(rule.rule_id));
        }
        let tz = match rule.scheduled() {
            Some(s) => Some(s.timezone.parse::<Tz>().map_err(|_| RulesError::UnknownTimezone {
                rule: rule.rule_id.clone(),
                zone: s.timezone.clone(),
            })?),
            None => None,
        };
        out.push(LoadedRule { rule, tz });
    }
    Ok(out)
}

/// Reads a JSON array of rules.
pub fn load_rules(path: &Path) -> Result<Vec<LoadedRule>, RulesError> {
    let rules: Vec<NotificationRule> = serde_json::from_slice(&fs::read(path)?)?;
    prepare_rules(rules)
}

type DedupKey = (String, String, Timestamp);

/// One notification the scheduler decided to send.
#[derive(Debug, Clone, PartialEq)]
pub struct Due {
    pub rule_id: String,
    pub participant_id: String,
    pub push_token: Option<String>,
    pub message: String,
    pub scheduled_for: Option<Timestamp>,
    pub triggered_at: Timestamp,
}

impl Due {
    fn key(&self) -> DedupKey {
        (
            self.rule_id.clone(),
            self.participant_id.clone(),
            self.scheduled_for.unwrap_or(self.triggered_at),
        )
    }
}

#[derive(Default)]
struct SchedState {
    done: HashSet<DedupKey>,
    in_flight: HashSet<DedupKey>,
    ledger: CooldownLedger,
}

pub struct Scheduler {
    rules: RwLock<Vec<LoadedRule>>,
    roster: Arc<dyn Roster>,
    observations: Arc<dyn Observations>,
    log: Arc<dyn DispatchLog>,
    provider: Arc<dyn PushProvider + Send + Sync>,
    clock: Arc<dyn Clock + Send + Sync>,
    state: Mutex<SchedState>,
    grace_ms: i64,
}

impl Scheduler {
    /// Recovers dedup keys and cooldowns from `log`.
    pub fn new(
        rules: Vec<LoadedRule>,
        roster: Arc<dyn Roster>,
        observations: Arc<dyn Observations>,
        log: Arc<dyn DispatchLog>,
        provider: Arc<dyn PushProvider + Send + Sync>,
        clock: Arc<dyn Clock + Send + Sync>,
    ) -> Result<Scheduler, String> {
        let mut state = SchedState::default();
        for rec in log.load()? {
            if rec.scheduled_for.is_none() {
                state.ledger.record(&rec.rule_id, &rec.participant_id, rec.triggered_at);
            }
            state.done.insert(rec.dedup_key());
        }
        Ok(Scheduler {
            rules: RwLock::new(rules),
            roster,
            observations,
            log,
            provider,
            clock,
            state: Mutex::new(state),
            grace_ms: DEFAULT_GRACE_MS,
        })
    }

    pub fn with_grace(mut self, grace_ms: i64) -> Self {
        self.grace_ms = grace_ms;
        self
    }

    pub fn set_rules(&self, rules: Vec<LoadedRule>) {
        *self.rules.write().unwrap() = rules;
    }

    pub fn rule_ids(&self) -> Vec<String> {
        self.rules.read().unwrap().iter().map(|r| r.rule.rule_id.clone()).collect()
    }

    /// Everything due at `now` that was not sent or started before; the
    /// returned items are marked in flight.
    pub fn due(&self, now: Timestamp) -> Vec<Due> {
        let rules = self.rules.read().unwrap().clone();
        let recipients = self.roster.recipients();
        let tokens: BTreeMap<&str, Option<&String>> = recipients
            .iter()
            .map(|r| (r.participant_id.as_str(), r.push_token.as_ref()))
            .collect();
        let mut candidates = Vec::new();
        let mut state = self.state.lock().unwrap();

        for LoadedRule { rule, tz } in rules.iter().filter(|r| r.rule.enabled) {
            if let Some(tz) = tz {
                let earliest = now.plus_millis(-self.grace_ms);
                let mut dates: Vec<NaiveDate> = [earliest, now]
                    .iter()
                    .filter_map(|t| t.to_datetime())
                    .map(|d| tz.from_utc_datetime(&d.naive_utc()).date_naive())
                    .collect();
                dates.dedup();
                for r in &recipients {
                    for &date in &dates {
                        let Ok(plan) = plan_day(rule, date, &r.participant_id, tz) else {
                            continue;
                        };
                        for t in plan.into_iter().filter(|&t| t <= now && t >= earliest) {
                            candidates.push(Due {
                                rule_id: rule.rule_id.clone(),
                                participant_id: r.participant_id.clone(),
                                push_token: r.push_token.clone(),
                                message: rule.message.clone(),
                                scheduled_for: Some(t),
                                triggered_at: now,
                            });
                        }
                    }
                }
            } else {
                let from = now.plus_millis(-PRESENCE_TTL_MS);
                let to = now.plus_millis(1);
                let readings = self.observations.readings(from, to);
                let latest = latest_by_location(&readings, now);
                let mut presence = PresenceTracker::new();
                for (t, p, loc) in self.observations.location_reports(from, to) {
                    presence.observe(&p, t, &loc);
                }
                let present = presence.present_at(now);
                for trig in evaluate_conditional(rule, &latest, &present, now, &mut state.ledger) {
                    candidates.push(Due {
                        rule_id: trig.rule_id,
                        push_token: tokens.get(trig.participant_id.as_str()).copied().flatten().cloned(),
                        participant_id: trig.participant_id,
                        message: rule.message.clone(),
                        scheduled_for: None,
                        triggered_at: now,
                    });
                }
            }
        }
        candidates.retain(|d| {
            let k = d.key();
            !state.done.contains(&k) && state.in_flight.insert(k)
        });
        candidates
    }

    /// Delivers one item with retries and appends its record to the log.
    pub fn dispatch(&self, due: &Due) -> Result<DispatchRecord, String> {
        let record = match &due.push_token {
            None => DispatchRecord {
                rule_id: due.rule_id.clone(),
                participant_id: due.participant_id.clone(),
                scheduled_for: due.scheduled_for,
                triggered_at: due.triggered_at,
                delivered_at: None,
                provider_status: STATUS_NO_PUSH_TOKEN.into(),
                attempts: 0,
            },
            Some(token) => {
                let notice = PushNotice {
                    participant_token: token.clone(),
                    message: due.message.clone(),
                    rule_id: due.rule_id.clone(),
                };
                let delivery = deliver(&*self.provider, &*self.clock, &notice);
                for (i, f) in delivery.failures.iter().enumerate() {
                    tracing::warn!(
                        rule = %due.rule_id,
                        participant = %due.participant_id,
                        attempt = i + 1,
                        failure = %f,
                        "push attempt failed"
                    );
                }
                DispatchRecord {
                    rule_id: due.rule_id.clone(),
                    participant_id: due.participant_id.clone(),
                    scheduled_for: due.scheduled_for,
                    triggered_at: due.triggered_at,
                    delivered_at: delivery.delivered_at,
                    provider_status: delivery.status(),
                    attempts: delivery.attempts,
                }
            }
        };
        let appended = self.log.append(&record);
        let mut state = self.state.lock().unwrap();
        let key = due.key();
        state.in_flight.remove(&key);
        appended?;
        state.done.insert(key);
        Ok(record)
    }

    /// Plans and delivers everything due at `now`, sequentially.
    pub fn tick(&self, now: Timestamp) -> Vec<Result<DispatchRecord, String>> {
        self.due(now).iter().map(|d| self.dispatch(d)).collect()
    }

    /// Background loop on its own thread: every `interval` it collects due
    /// items and delivers each on a separate thread.
    pub fn spawn(self: Arc<Self>, interval: Duration) -> SchedulerHandle {
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let join = thread::spawn(move || {
            while !flag.load(Ordering::SeqCst) {
                for due in self.due(self.clock.now()) {
                    let me = self.clone();
                    thread::spawn(move || {
                        if let Err(e) = me.dispatch(&due) {
                            tracing::error!(error = %e, "dispatch log append failed");
                        }
                    });
                }
                let mut waited = Duration::ZERO;
                while waited < interval && !flag.load(Ordering::SeqCst) {
                    let step = Duration::from_millis(200).min(interval - waited);
                    thread::sleep(step);
                    waited += step;
                }
            }
        });
        SchedulerHandle { stop, join }
    }
}

pub struct SchedulerHandle {
    stop: Arc<AtomicBool>,
    join: thread::JoinHandle<()>,
}

impl SchedulerHandle {
    pub fn stop(self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = self.join.join();
    }
}
