//! Standalone worker speaking the NDJSON protocol over a WebSocket, with
//! reconnection and optional fault injection for resilience testing.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use futures::{SinkExt, StreamExt};
use parking_lot::Mutex;
use geoloop_core::jobs::JobKind;
use geoloop_core::protocol::{decode_ndjson, encode_ndjson, ServerMessage, WorkerMessage};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use tokio::sync::mpsc;
use tokio_tungstenite::tungstenite::Message;

use crate::worker::{run_assignment, Current, Outbox};

static ASSIGNMENTS: AtomicU64 = AtomicU64::new(0);
static CRASHES: AtomicU64 = AtomicU64::new(0);

/// Process-wide `(assignments received, crashes injected)` across all
/// remote workers, for reporting fault-injection runs.
pub fn chaos_counts() -> (u64, u64) {
    (ASSIGNMENTS.load(Ordering::Relaxed), CRASHES.load(Ordering::Relaxed))
}

/// Simulated failures. With probability `crash_probability` an assignment
/// ends in a crash: either the connection drops after the first progress
/// report, or the worker goes silent and delivers its result only after the
/// server has given up on it.
#[derive(Debug, Clone, Copy)]
pub struct Chaos {
    pub crash_probability: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct RemoteOptions {
    /// `ws://host:port` (an `http://` prefix is accepted too).
    pub server: String,
    pub token: String,
    pub worker_id: String,
    pub capabilities: Vec<JobKind>,
    pub chaos: Option<Chaos>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Crash {
    Disconnect,
    Zombie,
}

pub fn worker_url(server: &str, token: &str) -> String {
    let base = server.trim_end_matches('/');
    let base = if let Some(rest) = base.strip_prefix("http://") {
        format!("ws://{rest}")
    } else if let Some(rest) = base.strip_prefix("https://") {
        format!("wss://{rest}")
    } else {
        base.to_string()
    };
    format!("{base}/ws/worker?token={token}")
}

/// Runs until the task is dropped, reconnecting with capped backoff.
pub async fn run(opts: RemoteOptions) -> anyhow::Result<()> {
    let mut rng = opts.chaos.map(|c| StdRng::seed_from_u64(c.seed));
    let mut backoff = Duration::from_millis(50);
    loop {
        let mut registered = false;
        let outcome = session(&opts, rng.as_mut(), &mut registered).await;
        if let Err(e) = outcome {
            tracing::warn!(worker_id = %opts.worker_id, error = %e, "worker session ended");
        }
        // Only repeated failures to get registered back off further.
        backoff = if registered {
            Duration::from_millis(50)
        } else {
            (backoff * 2).min(Duration::from_secs(5))
        };
        tokio::time::sleep(backoff).await;
    }
}

async fn session(opts: &RemoteOptions, mut rng: Option<&mut StdRng>, registered: &mut bool) -> anyhow::Result<()> {
    let (ws, _) = tokio_tungstenite::connect_async(worker_url(&opts.server, &opts.token)).await?;
    let (mut sink, mut stream) = ws.split();
    let (tx, mut outgoing) = mpsc::unbounded_channel::<WorkerMessage>();
    let mut writer = tokio::spawn(async move {
        while let Some(m) = outgoing.recv().await {
            if sink.send(Message::Text(encode_ndjson(&[m]).into())).await.is_err() {
                break;
            }
        }
        let _ = sink.close().await;
    });
    tx.send(WorkerMessage::Register {
        worker_id: opts.worker_id.clone(),
        capabilities: opts.capabilities.clone(),
    })?;
    let out: Outbox = {
        let tx = tx.clone();
        Arc::new(move |m| {
            let _ = tx.send(m);
        })
    };
    let current = Arc::new(Current::default());
    // Signalled by a zombie once its late result is out: start over.
    let (restart_tx, mut restart_rx) = mpsc::unbounded_channel::<()>();
    let mut heartbeat: Option<tokio::task::JoinHandle<()>> = None;
    let mut interval = Duration::from_secs(10);
    let result: anyhow::Result<()> = async {
        loop {
            let frame = tokio::select! {
                f = stream.next() => match f {
                    Some(f) => f,
                    None => break,
                },
                _ = restart_rx.recv() => return Err(anyhow::anyhow!("simulated restart after a late result")),
            };
            let text = match frame? {
                Message::Text(t) => t.to_string(),
                Message::Close(_) => break,
                _ => continue,
            };
            for msg in decode_ndjson::<ServerMessage>(&text)? {
                match msg {
                    ServerMessage::Registered {
                        heartbeat_interval_ms, ..
                    } => {
                        *registered = true;
                        interval = Duration::from_millis(heartbeat_interval_ms.max(1));
                        let tx = tx.clone();
                        heartbeat = Some(tokio::spawn(async move {
                            let mut tick = tokio::time::interval(interval);
                            loop {
                                tick.tick().await;
                                if tx.send(WorkerMessage::Heartbeat {}).is_err() {
                                    break;
                                }
                            }
                        }));
                    }
                    ServerMessage::Assign { job } => {
                        let crash = rng.as_deref_mut().and_then(|r| {
                            let p = opts.chaos.map_or(0.0, |c| c.crash_probability);
                            (r.random::<f64>() < p).then(|| if r.random::<bool>() { Crash::Disconnect } else { Crash::Zombie })
                        });
                        ASSIGNMENTS.fetch_add(1, Ordering::Relaxed);
                        if crash.is_some() {
                            CRASHES.fetch_add(1, Ordering::Relaxed);
                        }
                        match crash {
                            Some(Crash::Disconnect) => {
                                tracing::info!(job_id = %job.id, "chaos: dropping the connection mid-job");
                                out(WorkerMessage::Progress {
                                    job_id: job.id,
                                    fraction: 0.1,
                                    attempt: Some(job.attempt),
                                });
                                tokio::time::sleep(Duration::from_millis(20)).await;
                                return Err(anyhow::anyhow!("simulated crash"));
                            }
                            Some(Crash::Zombie) => {
                                tracing::info!(job_id = %job.id, "chaos: going silent, result will arrive late");
                                if let Some(h) = heartbeat.take() {
                                    h.abort();
                                }
                                let flag = current.start(job.id);
                                let o = out.clone();
                                let restart = restart_tx.clone();
                                tokio::spawn(async move {
                                    let late = tokio::task::spawn_blocking(move || {
                                        let held: Arc<Mutex<Vec<WorkerMessage>>> = Default::default();
                                        let h = held.clone();
                                        let hold: Outbox = Arc::new(move |m| h.lock().push(m));
                                        run_assignment(&job, &hold, &flag);
                                        let late = std::mem::take(&mut *held.lock());
                                        late
                                    })
                                    .await
                                    .unwrap_or_default();
                                    // Long enough for the heartbeat timeout to expire.
                                    tokio::time::sleep(interval * 5).await;
                                    for m in late {
                                        if matches!(m, WorkerMessage::Result { .. }) {
                                            o(m);
                                        }
                                    }
                                    let _ = restart.send(());
                                });
                            }
                            None => {
                                let flag = current.start(job.id);
                                let o = out.clone();
                                tokio::task::spawn_blocking(move || run_assignment(&job, &o, &flag));
                            }
                        }
                    }
                    ServerMessage::Cancel { job_id } => current.cancel(job_id),
                    ServerMessage::Error { message } => return Err(anyhow::anyhow!("server: {message}")),
                }
            }
        }
        Ok(())
    }
    .await;
    if let Some(h) = heartbeat {
        h.abort();
    }
    drop(out);
    drop(tx);
    // Flush what is queued; in-flight jobs may still hold senders.
    if tokio::time::timeout(Duration::from_millis(200), &mut writer).await.is_err() {
        writer.abort();
    }
    result
}
