//! Shared harness: a service on an ephemeral port backed by a temp dir.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use futures::StreamExt;
use geoloop_core::geo::{Raster, Sidecar};
use geoloop_server::{Config, Server};
use reqwest::StatusCode;
use serde_json::{json, Value};
use tokio_tungstenite::tungstenite::Message;

pub const ALICE: &str = "alice-token";
pub const BOB: &str = "bob-token";

pub struct Harness {
    pub server: Server,
    pub dir: tempfile::TempDir,
    pub http: reqwest::Client,
    pub token: String,
}

pub fn test_config(dir: &std::path::Path) -> Config {
    let mut tokens = BTreeMap::new();
    tokens.insert(ALICE.to_string(), "alice".to_string());
    tokens.insert(BOB.to_string(), "bob".to_string());
    Config {
        addr: "127.0.0.1:0".parse().unwrap(),
        data_dir: dir.to_path_buf(),
        tokens,
        workers: 1,
        heartbeat_interval_ms: 100,
        heartbeat_timeout_ms: 400,
        sweep_interval_ms: 50,
        sync_writes: false,
        ..Config::default()
    }
}

pub async fn start(tweak: impl FnOnce(&mut Config)) -> Harness {
    let dir = tempfile::tempdir().unwrap();
    let mut config = test_config(dir.path());
    tweak(&mut config);
    let server = geoloop_server::start(config).await.unwrap();
    Harness {
        server,
        dir,
        http: reqwest::Client::new(),
        token: ALICE.to_string(),
    }
}

async fn body(resp: reqwest::Response) -> (StatusCode, Value) {
    let status = resp.status();
    let bytes = resp.bytes().await.unwrap();
    let v = serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into_owned()));
    (status, v)
}

impl Harness {
    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.server.http_url())
    }

    pub async fn get_as(&self, token: &str, path: &str) -> (StatusCode, Value) {
        body(self.http.get(self.url(path)).bearer_auth(token).send().await.unwrap()).await
    }

    pub async fn get(&self, path: &str) -> (StatusCode, Value) {
        self.get_as(&self.token, path).await
    }

    pub async fn post_as(&self, token: &str, path: &str, v: &Value) -> (StatusCode, Value) {
        body(self.http.post(self.url(path)).bearer_auth(token).json(v).send().await.unwrap()).await
    }

    pub async fn post(&self, path: &str, v: &Value) -> (StatusCode, Value) {
        self.post_as(&self.token, path, v).await
    }

    pub async fn delete(&self, path: &str) -> (StatusCode, Value) {
        body(self.http.delete(self.url(path)).bearer_auth(&self.token).send().await.unwrap()).await
    }

    /// GET expecting 2xx.
    pub async fn ok(&self, path: &str) -> Value {
        let (s, v) = self.get(path).await;
        assert!(s.is_success(), "GET {path}: {s} {v}");
        v
    }

    /// POST expecting 2xx.
    pub async fn created(&self, path: &str, body: &Value) -> Value {
        let (s, v) = self.post(path, body).await;
        assert!(s.is_success(), "POST {path}: {s} {v}");
        v
    }

    pub async fn project(&self, name: &str) -> u64 {
        self.created("/api/projects", &json!({ "name": name })).await["id"].as_u64().unwrap()
    }

    /// Uploads a raster; returns (raster id, tiling job id).
    pub async fn upload(&self, project: u64, raster: &Raster) -> (u64, u64) {
        let sidecar = serde_json::to_vec(&Sidecar {
            crs: raster.meta.crs,
            geotransform: raster.meta.geotransform,
        })
        .unwrap();
        let form = reqwest::multipart::Form::new()
            .part("image", reqwest::multipart::Part::bytes(raster.to_png()).file_name("scene.png"))
            .part("sidecar", reqwest::multipart::Part::bytes(sidecar).file_name("scene.json"))
            .text("name", "scene");
        let resp = self
            .http
            .post(self.url(&format!("/api/projects/{project}/rasters")))
            .bearer_auth(&self.token)
            .multipart(form)
            .send()
            .await
            .unwrap();
        let (s, v) = body(resp).await;
        assert_eq!(s, StatusCode::CREATED, "{v}");
        (v["raster"]["id"].as_u64().unwrap(), v["job"]["id"].as_u64().unwrap())
    }

    pub async fn submit(&self, kind: &str, payload: Value) -> u64 {
        self.created("/api/jobs", &json!({ "kind": kind, "payload": payload })).await["id"]
            .as_u64()
            .unwrap()
    }

    /// Polls until the job is terminal.
    pub async fn wait_job(&self, id: u64, timeout: Duration) -> Value {
        let deadline = Instant::now() + timeout;
        loop {
            let j = self.ok(&format!("/api/jobs/{id}")).await;
            if matches!(j["state"].as_str(), Some("succeeded" | "failed" | "cancelled")) {
                return j;
            }
            assert!(Instant::now() < deadline, "job {id} still {} after {timeout:?}", j["state"]);
            tokio::time::sleep(Duration::from_millis(20)).await;
        }
    }

    pub async fn run_job(&self, kind: &str, payload: Value, timeout: Duration) -> Value {
        let id = self.submit(kind, payload).await;
        let j = self.wait_job(id, timeout).await;
        assert_eq!(j["state"], "succeeded", "{kind} job: {j}");
        j
    }

    pub async fn models(&self) -> Vec<Value> {
        fn walk(nodes: &Value, out: &mut Vec<Value>) {
            for n in nodes.as_array().unwrap() {
                out.push(n.clone());
                walk(&n["children"], out);
            }
        }
        let mut out = Vec::new();
        walk(&self.ok("/api/models").await, &mut out);
        out
    }

    pub async fn model_named(&self, name: &str) -> u64 {
        self.models().await.iter().find(|m| m["name"] == name).unwrap()["id"].as_u64().unwrap()
    }

    pub fn ws_url(&self, path: &str) -> String {
        format!("{}{path}", self.server.ws_url())
    }
}

pub type Ws = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

pub async fn ws_connect(url: &str) -> Ws {
    tokio_tungstenite::connect_async(url).await.unwrap().0
}

/// Next JSON text frame, or `None` on timeout.
pub async fn ws_next(ws: &mut Ws, timeout: Duration) -> Option<Value> {
    let deadline = tokio::time::Instant::now() + timeout;
    loop {
        let frame = tokio::time::timeout_at(deadline, ws.next()).await.ok()??.ok()?;
        if let Message::Text(t) = frame {
            return Some(serde_json::from_str(t.as_str()).unwrap());
        }
    }
}

/// Collects frames until one satisfies `pred`.
pub async fn ws_until(ws: &mut Ws, timeout: Duration, mut pred: impl FnMut(&Value) -> bool) -> Vec<Value> {
    let mut seen = Vec::new();
    let deadline = Instant::now() + timeout;
    loop {
        let left = deadline.saturating_duration_since(Instant::now());
        let Some(v) = ws_next(ws, left).await else {
            panic!("no matching frame within {timeout:?}; saw {seen:?}");
        };
        let done = pred(&v);
        seen.push(v);
        if done {
            return seen;
        }
    }
}

/// A scaled-down camp scene (same radiometry as the benchmark).
pub fn small_camp(seed: u64, width: u32, height: u32, n: usize) -> geoloop_core::synth::CampScene {
    let spec = geoloop_core::synth::CampSceneSpec {
        width,
        height,
        n_structures: n,
        ..geoloop_core::synth::CampSceneSpec::benchmark(seed)
    };
    geoloop_core::synth::generate_camp_scene(&spec).unwrap()
}

pub fn scene_raster(scene: &geoloop_core::synth::CampScene) -> Raster {
    scene.raster(geoloop_core::RasterId(0)).unwrap()
}

pub const SLOW: Duration = Duration::from_secs(120);
