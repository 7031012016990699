#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use ema_core::registry::EligibilityRule;
use ema_core::{Survey, Timestamp};
use ema_platform::config::HashCost;
use ema_platform::keys::{ApiKey, KeyStore};
use ema_platform::notify::ManualClock;
use ema_platform::registry::Registry;
use ema_platform::service::{self, load_survey, AppState};
use ema_platform::store::Store;
use serde_json::{json, Value};
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

pub const WATCH_SECRET: &str = "watch-secret-0123456789";
pub const START: &str = "2021-03-01T08:00:00.000Z";

pub fn asset(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../assets").join(name)
}

pub fn comfort_survey() -> Survey {
    load_survey(&asset("comfort-survey.json")).unwrap()
}

pub fn cheap() -> HashCost {
    HashCost {
        memory_kib: 8,
        iterations: 1,
        parallelism: 1,
    }
}

pub fn watch_key(rate: u32) -> ApiKey {
    ApiKey::new("watch", WATCH_SECRET, Some(rate))
}

pub struct TestServer {
    pub base: String,
    pub state: Arc<AppState>,
    pub clock: Arc<ManualClock>,
    shutdown: Option<oneshot::Sender<()>>,
    handle: Option<JoinHandle<()>>,
}

impl TestServer {
    /// Streams under `root/streams`, registry under `root/registry`.
    pub async fn start(root: &Path, keys: Vec<ApiKey>, surveys: Vec<Survey>) -> TestServer {
        let clock = Arc::new(ManualClock::new(START.parse::<Timestamp>().unwrap()));
        let store = Arc::new(Store::open(root.join("streams")).unwrap());
        let registry = Arc::new(
            Registry::open(&root.join("registry"), EligibilityRule::illustrative_default(), cheap()).unwrap(),
        );
        let state = Arc::new(
            AppState::new(surveys, KeyStore::new(keys).unwrap(), 60, store, registry, clock.clone()).unwrap(),
        );
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let (tx, rx) = oneshot::channel();
        let st = state.clone();
        let handle = tokio::spawn(async move {
            service::serve(st, listener, async {
                let _ = rx.await;
            })
            .await
            .unwrap();
        });
        TestServer {
            base,
            state,
            clock,
            shutdown: Some(tx),
            handle: Some(handle),
        }
    }

    pub async fn stop(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(h) = self.handle.take() {
            let _ = h.await;
        }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }
}

pub fn client() -> reqwest::Client {
    reqwest::Client::new()
}

pub async fn post(
    client: &reqwest::Client,
    url: &str,
    key: Option<&str>,
    body: &Value,
) -> (u16, Value) {
    let mut req = client.post(url).json(body);
    if let Some(k) = key {
        req = req.header("X-Api-Key", k);
    }
    let resp = req.send().await.unwrap();
    let status = resp.status().as_u16();
    let text = resp.text().await.unwrap();
    (status, serde_json::from_str(&text).unwrap_or(Value::String(text)))
}

/// Registers, screens eligible and consents; returns the random id.
pub async fn enroll(server: &TestServer, client: &reqwest::Client, email: &str, signature: &str) -> String {
    let key = watch_key(0).credential();
    let (s, v) = post(
        client,
        &server.url("/api/v1/participants"),
        Some(&key),
        &json!({"email": email, "password": "long enough password"}),
    )
    .await;
    assert_eq!(s, 201, "{v}");
    let id = v["randomId"].as_str().unwrap().to_owned();
    let (s, v) = post(
        client,
        &server.url(&format!("/api/v1/participants/{id}/screening")),
        Some(&key),
        &json!({"answers": {"age": 30, "owns-compatible-watch": true}}),
    )
    .await;
    assert_eq!((s, v["eligibility"].as_str()), (200, Some("eligible")));
    let (s, _) = post(
        client,
        &server.url(&format!("/api/v1/participants/{id}/consent")),
        Some(&key),
        &json!({"signatureName": signature, "documentVersion": "v1"}),
    )
    .await;
    assert_eq!(s, 200);
    id
}
