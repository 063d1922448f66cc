//! The geoloop service: HTTP/WebSocket API, durable job orchestration and
//! the reference worker.

pub mod api;
pub mod app;
pub mod bus;
pub mod config;
pub mod error;
pub mod orchestrator;
pub mod pipeline;
pub mod records;
pub mod remote_worker;
pub mod worker;
pub mod ws;

use std::net::SocketAddr;
use std::sync::Arc;

use anyhow::Context;
use geoloop_core::jobs::{Job, JobKind};
use geoloop_store::{Store, StoreOptions};
use serde_json::Value;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

pub use app::App;
pub use config::Config;

use bus::EventBus;
use orchestrator::{Orchestrator, OrchestratorConfig};

/// Full public representation of a job, including its transition history.
pub fn job_view(job: &Job) -> Value {
    records::encode(job)
}

/// Opens the store and wires the event bus and orchestrator. Must run
/// inside a tokio runtime.
pub fn build_app(config: Config) -> anyhow::Result<Arc<App>> {
    let tokens = config.resolve_tokens()?;
    let store = Arc::new(
        Store::open_with(
            &config.data_dir,
            StoreOptions {
                sync: config.sync_writes,
                ..StoreOptions::default()
            },
        )
        .with_context(|| format!("opening data directory {}", config.data_dir.display()))?,
    );
    let bus = EventBus::new();
    let b = bus.clone();
    store.set_commit_hook(Box::new(move |events| {
        b.publish(events);
    }));
    let orch = Orchestrator::new(
        store.clone(),
        OrchestratorConfig {
            heartbeat_interval: config.heartbeat_interval(),
            heartbeat_timeout: config.heartbeat_timeout(),
            max_attempts: config.max_attempts,
            resampling: config.resampling,
        },
    );
    let app = Arc::new(App {
        config,
        store,
        bus,
        orch,
        tokens,
    });
    app.seed_models()?;
    Ok(app)
}

/// A running service.
pub struct Server {
    pub addr: SocketAddr,
    pub app: Arc<App>,
    tasks: Vec<JoinHandle<()>>,
    shutdown: Option<oneshot::Sender<()>>,
    serve: Option<JoinHandle<std::io::Result<()>>>,
}

impl Server {
    pub fn http_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn ws_url(&self) -> String {
        format!("ws://{}", self.addr)
    }

    /// Stops accepting requests and waits for the listener to close.
    pub async fn stop(mut self) {
        for t in self.tasks.drain(..) {
            t.abort();
        }
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(s) = self.serve.take() {
            s.abort();
            let _ = s.await;
        }
    }

    /// Waits until the listener fails.
    pub async fn wait(mut self) -> anyhow::Result<()> {
        match self.serve.take() {
            Some(s) => Ok(s.await??),
            None => Ok(()),
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        for t in &self.tasks {
            t.abort();
        }
        if let Some(s) = &self.serve {
            s.abort();
        }
    }
}

/// Binds the configured address and starts the API, the heartbeat sweeper
/// and the configured number of in-process workers.
pub async fn start(config: Config) -> anyhow::Result<Server> {
    let addr = config.addr;
    let app = build_app(config)?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("binding {addr}"))?;
    let addr = listener.local_addr()?;
    let mut tasks = vec![app.orch.spawn_sweeper(app.config.sweep_interval())];
    for n in 1..=app.config.workers {
        tasks.push(worker::spawn_local(app.orch.clone(), format!("local-{n}"), JobKind::ALL.to_vec()));
    }
    let (tx, rx) = oneshot::channel::<()>();
    let router = api::router(app.clone());
    let serve = tokio::spawn(async move {
        axum::serve(listener, router)
            .with_graceful_shutdown(async move {
                let _ = rx.await;
            })
            .await
    });
    tracing::info!(%addr, "listening");
    Ok(Server {
        addr,
        app,
        tasks,
        shutdown: Some(tx),
        serve: Some(serve),
    })
}
