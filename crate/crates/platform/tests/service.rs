mod common;

use std::collections::BTreeMap;

use common::*;
use ema_core::ratelimit::WINDOW_MS;
use ema_core::time::MINUTE_MS;
use ema_core::{ResponsePayload, Survey, SurveyDefinition, Timestamp};
use ema_platform::keys::ApiKey;
use ema_platform::service::StoredResponse;
use ema_platform::store::{Filter, Stream};
use ema_testkit::{random_valid_payload, rng, sliding_window_oracle};
use rand::Rng;
use serde_json::{json, Value};

fn payload(pid: &str, answers: &[(&str, &str)]) -> ResponsePayload {
    ResponsePayload {
        participant_id: pid.into(),
        survey_id: "comfort-study".into(),
        survey_version: 1,
        started_at: "2021-03-01T08:15:20.000Z".parse().unwrap(),
        submitted_at: "2021-03-01T08:15:30.125Z".parse().unwrap(),
        answers: answers.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        physiological: Some(ema_core::Physiological {
            heart_rate: Some(72.0),
            ..Default::default()
        }),
        device_info: None,
    }
}

fn full_answers() -> Vec<(&'static str, &'static str)> {
    vec![
        ("tc-preference", "Cooler"),
        ("location-place", "Office"),
        ("indoor-outdoor", "Indoor"),
        ("air-movement", "Just right"),
        ("clothing", "Light"),
        ("activity", "Sitting"),
    ]
}

fn two_question() -> Survey {
    let def: SurveyDefinition =
        serde_json::from_slice(&std::fs::read(asset("two-question-survey.json")).unwrap()).unwrap();
    Survey::new(def).unwrap()
}

#[tokio::test]
async fn survey_document_round_trips_and_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let server = TestServer::start(dir.path(), vec![watch_key(60)], vec![comfort_survey()]).await;
    let c = client();
    let get = || c.get(server.url("/api/v1/surveys/comfort-study")).header("X-Api-Key", watch_key(60).credential());
    let first = get().send().await.unwrap();
    assert_eq!(first.status(), 200);
    let a = first.bytes().await.unwrap();
    let b = get().send().await.unwrap().bytes().await.unwrap();
    assert_eq!(a, b);
    let served: SurveyDefinition = serde_json::from_slice(&a).unwrap();
    let on_disk: SurveyDefinition =
        serde_json::from_slice(&std::fs::read(asset("comfort-survey.json")).unwrap()).unwrap();
    assert_eq!(served, on_disk);

    let missing = c.get(server.url("/api/v1/surveys/comfort-study")).send().await.unwrap();
    assert_eq!(missing.status(), 401);
    let unknown = c
        .get(server.url("/api/v1/surveys/nope"))
        .header("X-Api-Key", watch_key(60).credential())
        .send()
        .await
        .unwrap();
    assert_eq!(unknown.status(), 404);
    server.stop().await;
}

#[tokio::test]
async fn two_question_submission_is_stored_with_indices() {
    let dir = tempfile::tempdir().unwrap();
    let server = TestServer::start(dir.path(), vec![watch_key(60)], vec![two_question()]).await;
    let c = client();
    let pid = enroll(&server, &c, "p@example.org", "Pat Example").await;
    let mut p = payload(&pid, &[("tc-preference", "Cooler"), ("location-place", "Office")]);
    p.survey_id = "two-question".into();
    let key = watch_key(60).credential();
    let (s, receipt) = post(&c, &server.url("/api/v1/responses"), Some(&key), &serde_json::to_value(&p).unwrap()).await;
    assert_eq!(s, 201, "{receipt}");
    assert_eq!(receipt["responseId"], 1);
    assert_eq!(receipt["storedAt"], START);

    let stored = server.state.store().scan(Stream::Responses).unwrap();
    let body: StoredResponse = serde_json::from_value(stored[0].body.clone()).unwrap();
    assert_eq!(body.payload, p);
    assert_eq!(body.option_indices, BTreeMap::from([("tc-preference".into(), 0), ("location-place".into(), 1)]));

    // Skipping the entry question forms no path.
    let mut skip = p.clone();
    skip.answers.remove("tc-preference");
    let (s, err) = post(&c, &server.url("/api/v1/responses"), Some(&key), &serde_json::to_value(&skip).unwrap()).await;
    assert_eq!(s, 422);
    assert_eq!(err["error"], "invalidPayload");
    assert_eq!(err["violations"][0]["code"], "missingAnswer");
    server.stop().await;
}

#[tokio::test]
async fn version_survey_and_consent_gates() {
    let dir = tempfile::tempdir().unwrap();
    let server = TestServer::start(dir.path(), vec![watch_key(60)], vec![comfort_survey()]).await;
    let c = client();
    let key = watch_key(60).credential();
    let url = server.url("/api/v1/responses");
    let pid = enroll(&server, &c, "q@example.org", "Quinn Example").await;

    let mut stale = payload(&pid, &full_answers());
    stale.survey_version = 0;
    let (s, v) = post(&c, &url, Some(&key), &serde_json::to_value(&stale).unwrap()).await;
    assert_eq!((s, v["error"].as_str()), (409, Some("versionMismatch")));

    let mut other = payload(&pid, &full_answers());
    other.survey_id = "other".into();
    let (s, v) = post(&c, &url, Some(&key), &serde_json::to_value(&other).unwrap()).await;
    assert_eq!((s, v["violations"][0]["code"].as_str()), (422, Some("unknownSurvey")));

    let (s, v) = post(&c, &url, Some(&key), &serde_json::to_value(payload("0000000000000000000000", &full_answers())).unwrap()).await;
    assert_eq!((s, v["violations"][0]["code"].as_str()), (422, Some("participantNotConsented")));

    let (s, v) = post(&c, &url, Some(&key), &json!({"not": "a payload"})).await;
    assert_eq!((s, v["violations"][0]["code"].as_str()), (422, Some("malformedJson")));

    assert_eq!(server.state.store().last_id(Stream::Responses), 0);
    let (s, _) = post(&c, &url, Some(&key), &serde_json::to_value(payload(&pid, &full_answers())).unwrap()).await;
    assert_eq!(s, 201);
    server.stop().await;
}

#[tokio::test]
async fn sixty_first_post_in_an_hour_is_429_and_keys_are_isolated() {
    let dir = tempfile::tempdir().unwrap();
    let other = ApiKey::new("kiosk", "kiosk-secret-0123456789", Some(60));
    let server = TestServer::start(dir.path(), vec![watch_key(60), other.clone()], vec![comfort_survey()]).await;
    let c = client();
    let pid = enroll(&server, &c, "r@example.org", "Robin Example").await;
    let url = server.url("/api/v1/responses");
    let body = serde_json::to_value(payload(&pid, &full_answers())).unwrap();

    let mut r = rng(61);
    let mut t = START.parse::<Timestamp>().unwrap();
    let mut times = Vec::new();
    let mut got = Vec::new();
    for _ in 0..150 {
        t = t.plus_millis(r.random_range(0..MINUTE_MS));
        server.clock.set(t);
        times.push(t.as_millis());
        let (s, v) = post(&c, &url, Some(&watch_key(60).credential()), &body).await;
        assert!(s == 201 || (s == 429 && v["error"] == "rateLimited"), "{s} {v}");
        got.push(s == 201);
    }
    assert_eq!(got, sliding_window_oracle(&times, 60, WINDOW_MS));
    assert!(got.iter().filter(|&&ok| !ok).count() > 0);

    // The other key is untouched by the first key's exhaustion.
    let (s, _) = post(&c, &url, Some(&other.credential()), &body).await;
    assert_eq!(s, 201);
    server.stop().await;
}

#[tokio::test]
async fn idempotency_key_stores_once_and_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let token = "6f1c1e0a-8f4b-4c55-9d0e-3a2b1c0d9e8f";
    let (pid, first) = {
        let server = TestServer::start(dir.path(), vec![watch_key(60)], vec![comfort_survey()]).await;
        let c = client();
        let pid = enroll(&server, &c, "s@example.org", "Sam Example").await;
        let body = serde_json::to_value(payload(&pid, &full_answers())).unwrap();
        let send = || {
            c.post(server.url("/api/v1/responses"))
                .header("X-Api-Key", watch_key(60).credential())
                .header("Idempotency-Key", token)
                .json(&body)
                .send()
        };
        let (a, b) = tokio::join!(send(), send());
        let (a, b) = (a.unwrap(), b.unwrap());
        assert_eq!((a.status().as_u16(), b.status().as_u16()), (201, 201));
        let ra: Value = a.json().await.unwrap();
        let rb: Value = b.json().await.unwrap();
        assert_eq!(ra, rb);
        assert_eq!(server.state.store().last_id(Stream::Responses), 1);
        server.stop().await;
        (pid, ra)
    };
    let server = TestServer::start(dir.path(), vec![watch_key(60)], vec![comfort_survey()]).await;
    let c = client();
    let body = serde_json::to_value(payload(&pid, &full_answers())).unwrap();
    let resp = c
        .post(server.url("/api/v1/responses"))
        .header("X-Api-Key", watch_key(60).credential())
        .header("Idempotency-Key", token)
        .json(&body)
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 201);
    assert_eq!(resp.headers()["idempotent-replayed"], "true");
    assert_eq!(resp.json::<Value>().await.unwrap(), first);
    assert_eq!(server.state.store().last_id(Stream::Responses), 1);

    let mut changed = payload(&pid, &full_answers());
    changed.answers.insert("activity".into(), "Resting".into());
    let resp = c
        .post(server.url("/api/v1/responses"))
        .header("X-Api-Key", watch_key(60).credential())
        .header("Idempotency-Key", token)
        .json(&changed)
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 422);
    let bad = c
        .post(server.url("/api/v1/responses"))
        .header("X-Api-Key", watch_key(60).credential())
        .header("Idempotency-Key", "not-a-uuid")
        .json(&body)
        .send()
        .await
        .unwrap();
    assert_eq!(bad.status(), 422);
    server.stop().await;
}

#[tokio::test]
async fn every_endpoint_rejects_bad_keys_before_touching_storage() {
    let dir = tempfile::tempdir().unwrap();
    let mut disabled = ApiKey::new("off", "disabled-secret-0123456789", None);
    disabled.enabled = false;
    let server = TestServer::start(dir.path(), vec![watch_key(60), disabled.clone()], vec![comfort_survey()]).await;
    let c = client();
    let id = "0000000000000000000000";
    let endpoints: Vec<(&str, String)> = vec![
        ("GET", "/api/v1/surveys/comfort-study".into()),
        ("POST", "/api/v1/responses".into()),
        ("POST", "/api/v1/participants".into()),
        ("GET", format!("/api/v1/participants/{id}")),
        ("POST", format!("/api/v1/participants/{id}/screening")),
        ("POST", format!("/api/v1/participants/{id}/consent")),
        ("POST", format!("/api/v1/participants/{id}/onboarding")),
        ("POST", format!("/api/v1/participants/{id}/push-token")),
        ("GET", format!("/api/v1/participants/{id}/consent-receipt")),
    ];
    let store_before = server.state.store().access_count();
    let registry_before = server.state.registry().access_count();
    let bad_keys = [
        None,
        Some("watch.wrong-secret-000000000".to_string()),
        Some("watch".to_string()),
        Some(disabled.credential()),
        Some(String::new()),
    ];
    for (method, path) in &endpoints {
        for key in &bad_keys {
            let mut req = match *method {
                "GET" => c.get(server.url(path)),
                _ => c.post(server.url(path)).json(&json!({"email": "x@y.org", "password": "0123456789"})),
            };
            if let Some(k) = key {
                req = req.header("X-Api-Key", k);
            }
            let resp = req.send().await.unwrap();
            assert_eq!(resp.status(), 401, "{method} {path} {key:?}");
            let body: Value = resp.json().await.unwrap();
            assert_eq!(body["error"], "unauthorized");
        }
    }
    assert_eq!(server.state.store().access_count(), store_before);
    assert_eq!(server.state.registry().access_count(), registry_before);
    server.stop().await;
}

#[tokio::test]
async fn participant_lifecycle_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let server = TestServer::start(dir.path(), vec![watch_key(60)], vec![comfort_survey()]).await;
    let c = client();
    let key = watch_key(60).credential();
    let p = |path: String| server.url(&format!("/api/v1/participants{path}"));

    let (s, v) = post(&c, &p(String::new()), Some(&key), &json!({"email": "bad", "password": "0123456789"})).await;
    assert_eq!((s, v["error"].as_str()), (422, Some("invalidEmail")));
    let (s, v) = post(&c, &p(String::new()), Some(&key), &json!({"email": "t@example.org", "password": "short"})).await;
    assert_eq!((s, v["error"].as_str()), (422, Some("weakPassword")));
    let (s, v) = post(&c, &p(String::new()), Some(&key), &json!({"email": "t@example.org", "password": "0123456789"})).await;
    assert_eq!(s, 201);
    assert_eq!(v["stage"], "pending");
    assert!(v.get("email").is_none());
    let id = v["randomId"].as_str().unwrap().to_owned();
    assert_eq!(id.len(), 22);
    let (s, v) = post(&c, &p(String::new()), Some(&key), &json!({"email": "T@example.org", "password": "0123456789"})).await;
    assert_eq!((s, v["error"].as_str()), (409, Some("duplicateEmail")));

    let (s, v) = post(&c, &p(format!("/{id}/consent")), Some(&key), &json!({"signatureName": "T", "documentVersion": "v1"})).await;
    assert_eq!((s, v["error"].as_str()), (409, Some("notEligible")));
    let (s, v) = post(&c, &p(format!("/{id}/screening")), Some(&key), &json!({"answers": {"age": 19, "owns-compatible-watch": true}})).await;
    assert_eq!(s, 200);
    assert_eq!(v["eligibility"], "ineligible");
    assert_eq!(v["failing"], json!(["age >= 21"]));
    let (s, v) = post(&c, &p(format!("/{id}/screening")), Some(&key), &json!({"answers": {"age": 30}})).await;
    assert_eq!((s, v["error"].as_str()), (409, Some("alreadyScreened")));

    let id = enroll(&server, &c, "u@example.org", "Uma Example").await;
    let (s, v) = post(&c, &p(format!("/{id}/onboarding")), Some(&key), &json!({"answers": {"gender": "female", "age": 34}})).await;
    assert_eq!(s, 200);
    assert_eq!(v["stage"], "onboarded");
    for token in ["tok-1", "tok-2"] {
        let (s, _) = post(&c, &p(format!("/{id}/push-token")), Some(&key), &json!({"token": token})).await;
        assert_eq!(s, 200);
    }
    assert_eq!(server.state.registry().get(&id).unwrap().push_token.as_deref(), Some("tok-2"));

    let got: Value = c.get(p(format!("/{id}"))).header("X-Api-Key", &key).send().await.unwrap().json().await.unwrap();
    assert_eq!(got["onboarding"], json!({"gender": "female", "age": 34.0}));

    let receipt = c.get(p(format!("/{id}/consent-receipt"))).header("X-Api-Key", &key).send().await.unwrap();
    assert_eq!(receipt.status(), 200);
    assert!(receipt.headers()["content-type"].to_str().unwrap().starts_with("text/plain"));
    let text = receipt.text().await.unwrap();
    assert!(text.contains("signed-by: Uma Example"));
    let (body, digest) = text.rsplit_once("content-sha256: ").unwrap();
    use sha2::Digest;
    let expected: String = sha2::Sha256::digest(body.as_bytes()).iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(digest.trim(), expected);

    let missing = c.get(p("/AAAAAAAAAAAAAAAAAAAAAA".into())).header("X-Api-Key", &key).send().await.unwrap();
    assert_eq!(missing.status(), 404);
    server.stop().await;
}

#[tokio::test]
async fn aborted_sessions_never_reach_the_store() {
    let dir = tempfile::tempdir().unwrap();
    let server = TestServer::start(dir.path(), vec![watch_key(10_000)], vec![comfort_survey()]).await;
    let c = client();
    let pid = enroll(&server, &c, "v@example.org", "Val Example").await;
    let survey = comfort_survey();
    let mut r = rng(7);
    let mut completed = 0;
    for i in 0..60 {
        let now: Timestamp = START.parse().unwrap();
        let mut session = survey.start_session(now);
        let mut answers = BTreeMap::new();
        let abort_at = if i % 3 == 0 { Some(r.random_range(0..5)) } else { None };
        let mut step = 0;
        while session.current_question(&survey).is_some() {
            if abort_at == Some(step) {
                session.abort().unwrap();
                break;
            }
            let q = session.current_question(&survey).unwrap().clone();
            let k = r.random_range(0..q.options.len());
            answers.insert(q.identifier.clone(), q.options[k].clone());
            session.step(&survey, k).unwrap();
            step += 1;
        }
        let mut p = payload(&pid, &[]);
        p.answers = answers;
        if abort_at.is_none() {
            let (s, _) = post(&c, &server.url("/api/v1/responses"), Some(&watch_key(0).credential()), &serde_json::to_value(&p).unwrap()).await;
            assert_eq!(s, 201);
            completed += 1;
        } else {
            // A client that ignores the abort still cannot store a partial path.
            let (s, _) = post(&c, &server.url("/api/v1/responses"), Some(&watch_key(0).credential()), &serde_json::to_value(&p).unwrap()).await;
            assert_eq!(s, 422);
        }
    }
    let stored = server.state.store().scan(Stream::Responses).unwrap();
    assert_eq!(stored.len(), completed);
    for rec in stored {
        let p: ResponsePayload = serde_json::from_value(rec.body).unwrap();
        assert!(p.validate(&survey).is_ok());
    }
    server.stop().await;
}

#[tokio::test]
async fn randomized_payloads_round_trip_field_for_field() {
    let dir = tempfile::tempdir().unwrap();
    let server = TestServer::start(dir.path(), vec![watch_key(10_000)], vec![comfort_survey()]).await;
    let c = client();
    let pid = enroll(&server, &c, "w@example.org", "Wren Example").await;
    let survey = comfort_survey();
    let mut r = rng(1000);
    let mut sent = Vec::new();
    for _ in 0..100 {
        let p = random_valid_payload(&mut r, &survey, &pid);
        let (s, v) = post(&c, &server.url("/api/v1/responses"), Some(&watch_key(0).credential()), &serde_json::to_value(&p).unwrap()).await;
        assert_eq!(s, 201, "{v}");
        sent.push((v["responseId"].as_u64().unwrap(), p));
    }
    let stored = server
        .state
        .store()
        .query_range(
            Stream::Responses,
            Timestamp::from_millis(0),
            Timestamp::from_millis(i64::MAX / 4),
            Some(&Filter::new("participantId", &pid)),
        )
        .unwrap();
    let by_id: BTreeMap<u64, ResponsePayload> = stored
        .into_iter()
        .map(|r| (r.record_id, serde_json::from_value(r.body).unwrap()))
        .collect();
    for (id, p) in sent {
        assert_eq!(by_id[&id], p);
    }
    server.stop().await;
}
