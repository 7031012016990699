use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, Mutex};

use axum::routing::post;
use axum::Json;
use ema_core::fusion::{SensorReading, DEFAULT_LOCATION_KEY};
use ema_core::notify::{Clock, DispatchRecord, PushNotice, PushProvider};
use ema_core::schedule::{NotificationRule, PRESENCE_TTL_MS};
use ema_core::time::MINUTE_MS;
use ema_core::{ResponsePayload, Timestamp};
use ema_platform::notify::{
    load_rules, prepare_rules, DispatchLog, LoadedRule, ManualClock, MemoryLog, MemoryObservations,
    Recipient, Scheduler, WebhookProvider, STATUS_NO_PUSH_TOKEN,
};
use ema_platform::store::{Store, Stream};
use ema_testkit::{conditional_reference, random_conditional_scenario, rng};

fn rules() -> Vec<LoadedRule> {
    load_rules(&std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../assets/rules.json")).unwrap()
}

fn only(id: &str) -> Vec<LoadedRule> {
    rules().into_iter().filter(|r| r.rule.rule_id == id).collect()
}

fn roster(ids: &[&str]) -> Arc<Vec<Recipient>> {
    Arc::new(
        ids.iter()
            .map(|p| Recipient {
                participant_id: p.to_string(),
                push_token: Some(format!("tok-{p}")),
            })
            .collect(),
    )
}

#[derive(Default)]
struct Flaky {
    fail_first: u32,
    calls: AtomicU32,
    seen: Mutex<Vec<PushNotice>>,
}

impl PushProvider for Flaky {
    fn send(&self, notice: &PushNotice) -> Result<(), String> {
        self.seen.lock().unwrap().push(notice.clone());
        if self.calls.fetch_add(1, Ordering::SeqCst) < self.fail_first {
            Err("HTTP 503".into())
        } else {
            Ok(())
        }
    }
}

fn local_midnight_sgt() -> Timestamp {
    "2021-03-01T16:00:00.000Z".parse().unwrap()
}

#[test]
fn two_failures_then_success_logs_one_record_with_three_attempts() {
    let start = local_midnight_sgt();
    let clock = Arc::new(ManualClock::new(start));
    let provider = Arc::new(Flaky { fail_first: 2, ..Default::default() });
    let log = Arc::new(MemoryLog::default());
    let sched = Scheduler::new(
        only("ten-per-day"),
        roster(&["P1"]),
        Arc::new(MemoryObservations::default()),
        log.clone(),
        provider.clone(),
        clock.clone(),
    )
    .unwrap();
    let mut first = None;
    for m in 0..24 * 60 {
        let now = start.plus_millis(m * MINUTE_MS);
        clock.set(now);
        if let Some(r) = sched.tick(now).into_iter().next() {
            first = Some(r.unwrap());
            break;
        }
    }
    let rec = first.expect("a planned instant during the day");
    assert_eq!(rec.attempts, 3);
    assert_eq!(rec.provider_status, "ok");
    assert_eq!(rec.delivered_at, Some(rec.triggered_at.plus_millis(3 * MINUTE_MS)));
    assert_eq!(provider.calls.load(Ordering::SeqCst), 3);
    assert_eq!(log.load().unwrap(), vec![rec]);
}

#[test]
fn missing_token_is_logged_without_a_provider_call() {
    let start = local_midnight_sgt();
    let clock = Arc::new(ManualClock::new(start));
    let provider = Arc::new(Flaky::default());
    let log = Arc::new(MemoryLog::default());
    let sched = Scheduler::new(
        only("ten-per-day"),
        Arc::new(vec![Recipient {
            participant_id: "P1".into(),
            push_token: None,
        }]),
        Arc::new(MemoryObservations::default()),
        log.clone(),
        provider.clone(),
        clock.clone(),
    )
    .unwrap();
    for m in 0..24 * 60 {
        let now = start.plus_millis(m * MINUTE_MS);
        clock.set(now);
        sched.tick(now);
    }
    let records = log.load().unwrap();
    assert_eq!(records.len(), 10);
    assert!(records.iter().all(|r| r.provider_status == STATUS_NO_PUSH_TOKEN && r.attempts == 0));
    assert_eq!(provider.calls.load(Ordering::SeqCst), 0);
}

#[test]
fn restart_over_the_same_store_never_resends() {
    let dir = tempfile::tempdir().unwrap();
    let start = local_midnight_sgt();
    let provider = Arc::new(Flaky::default());
    let clock = Arc::new(ManualClock::new(start));
    let build = |store: Arc<Store>| {
        Scheduler::new(
            only("ten-per-day"),
            roster(&["P1", "P2"]),
            Arc::new(MemoryObservations::default()),
            store,
            provider.clone(),
            clock.clone(),
        )
        .unwrap()
    };
    let noon = 12 * 60;
    {
        let store = Arc::new(Store::open(dir.path()).unwrap());
        let sched = build(store);
        for m in 0..noon {
            let now = start.plus_millis(m * MINUTE_MS);
            clock.set(now);
            sched.tick(now);
        }
    }
    let store = Arc::new(Store::open(dir.path()).unwrap());
    let sched = build(store.clone());
    for m in noon - 10..24 * 60 {
        let now = start.plus_millis(m * MINUTE_MS);
        clock.set(now);
        sched.tick(now);
    }
    let records: Vec<DispatchRecord> = store
        .scan(Stream::Dispatches)
        .unwrap()
        .into_iter()
        .map(|r| serde_json::from_value(r.body).unwrap())
        .collect();
    assert_eq!(records.len(), 20);
    let keys: BTreeSet<_> = records.iter().map(|r| r.dedup_key()).collect();
    assert_eq!(keys.len(), 20);
    assert_eq!(provider.calls.load(Ordering::SeqCst), 20);
}

#[test]
fn webhook_provider_posts_the_notice() {
    let captured: Arc<Mutex<Vec<serde_json::Value>>> = Arc::default();
    let sink = captured.clone();
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let app = axum::Router::new()
                .route(
                    "/push",
                    post(move |Json(v): Json<serde_json::Value>| {
                        let sink = sink.clone();
                        async move {
                            sink.lock().unwrap().push(v);
                            "ok"
                        }
                    }),
                )
                .route("/down", post(|| async { (axum::http::StatusCode::SERVICE_UNAVAILABLE, "") }));
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    let addr = rx.recv().unwrap();
    let notice = PushNotice {
        participant_token: "tok-9".into(),
        message: "How do you feel?".into(),
        rule_id: "hot-office".into(),
    };
    WebhookProvider::new(&format!("http://{addr}/push")).unwrap().send(&notice).unwrap();
    let got = captured.lock().unwrap().clone();
    assert_eq!(got, vec![serde_json::to_value(&notice).unwrap()]);
    assert_eq!(got[0]["participantToken"], "tok-9");

    let err = WebhookProvider::new(&format!("http://{addr}/down")).unwrap().send(&notice).unwrap_err();
    assert!(err.contains("503"), "{err}");
}

fn location_report(at: Timestamp, participant: &str, location: &str) -> serde_json::Value {
    let payload = ResponsePayload {
        participant_id: participant.into(),
        survey_id: "comfort-study".into(),
        survey_version: 1,
        started_at: at,
        submitted_at: at,
        answers: [(DEFAULT_LOCATION_KEY.to_string(), location.to_string())].into(),
        physiological: None,
        device_info: None,
    };
    serde_json::to_value(payload).unwrap()
}

#[test]
fn conditional_rule_over_store_matches_reference_replay() {
    for seed in 0..3 {
        let scenario = random_conditional_scenario(&mut rng(seed), 5);
        let dir = tempfile::tempdir().unwrap();
        let store = Arc::new(Store::open(dir.path()).unwrap());
        let readings: Vec<(Timestamp, serde_json::Value)> = scenario
            .readings
            .iter()
            .map(|(t, loc, temp)| {
                let r = SensorReading {
                    logger_id: format!("L-{loc}"),
                    location_label: loc.clone(),
                    timestamp: *t,
                    dry_bulb_temp_c: *temp,
                    relative_humidity_pct: 50.0,
                };
                (*t, serde_json::to_value(r).unwrap())
            })
            .collect();
        store.append_batch(Stream::Sensor, readings).unwrap();
        let reports = scenario
            .reports
            .iter()
            .map(|(t, p, loc)| (*t, location_report(*t, p, loc)))
            .collect();
        store.append_batch(Stream::Responses, reports).unwrap();

        let clock = Arc::new(ManualClock::new(scenario.start));
        let ids: Vec<String> = (0..5).map(|p| format!("P{p}")).collect();
        let id_refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let sched = Scheduler::new(
            only("hot-office"),
            roster(&id_refs),
            store.clone(),
            store.clone(),
            Arc::new(Flaky::default()),
            clock.clone(),
        )
        .unwrap();
        let mut fired = Vec::new();
        for k in 0..scenario.steps {
            let now = scenario.start.plus_millis(k as i64 * scenario.step_ms);
            clock.set(now);
            for rec in sched.tick(now) {
                let rec = rec.unwrap();
                fired.push((rec.triggered_at, rec.participant_id));
            }
        }
        let expected = conditional_reference(&scenario, "Office", 28.0, true, 60 * MINUTE_MS, PRESENCE_TTL_MS);
        assert!(!expected.is_empty(), "seed {seed} never fires");
        assert_eq!(fired, expected, "seed {seed}");
    }
}

#[test]
fn rules_are_validated_on_load() {
    let bad: NotificationRule = serde_json::from_value(serde_json::json!({
        "ruleId": "x", "kind": "scheduled", "timesPerDay": 3, "wakingStart": "08:00",
        "wakingEnd": "22:00", "timezone": "Mars/Olympus", "message": "m", "enabled": true
    }))
    .unwrap();
    assert!(prepare_rules(vec![bad]).is_err());
    let mut dup = rules();
    dup.extend(rules());
    assert!(prepare_rules(dup.into_iter().map(|r| r.rule).collect()).is_err());
}

#[test]
fn spawned_loop_delivers_and_stops() {
    let start = local_midnight_sgt();
    let clock = Arc::new(ManualClock::new(start.plus_millis(23 * 60 * MINUTE_MS)));
    let log = Arc::new(MemoryLog::default());
    let sched = Arc::new(
        Scheduler::new(
            only("ten-per-day"),
            roster(&["P1"]),
            Arc::new(MemoryObservations::default()),
            log.clone(),
            Arc::new(Flaky::default()),
            clock.clone(),
        )
        .unwrap()
        .with_grace(24 * 60 * MINUTE_MS),
    );
    let handle = sched.clone().spawn(std::time::Duration::from_millis(50));
    let deadline = std::time::Instant::now() + std::time::Duration::from_secs(10);
    while log.load().unwrap().len() < 10 && std::time::Instant::now() < deadline {
        std::thread::sleep(std::time::Duration::from_millis(20));
    }
    handle.stop();
    let recs = log.load().unwrap();
    assert_eq!(recs.len(), 10);
    assert!(recs.iter().all(|r| r.triggered_at == clock.now()));
}
