//! Job execution loop shared by the in-process worker and the standalone
//! worker binary.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use geoloop_core::jobs::JobKind;
use geoloop_core::protocol::{AssignedJob, ServerMessage, WorkerMessage};
use parking_lot::Mutex;
use tokio::sync::mpsc;

use crate::orchestrator::Orchestrator;

/// Where a worker's outgoing messages go.
pub type Outbox = Arc<dyn Fn(WorkerMessage) + Send + Sync>;

/// Flag raised when the server cancels the running job.
pub type CancelFlag = Arc<AtomicBool>;

/// Runs one assignment on the current (blocking) thread, reporting
/// progress and the outcome unless cancelled meanwhile.
pub fn run_assignment(job: &AssignedJob, out: &Outbox, cancelled: &CancelFlag) {
    let (id, attempt) = (job.id, job.attempt);
    let mut last = -1.0;
    let mut progress = |f: f64| {
        if !cancelled.load(Ordering::Relaxed) && f > last {
            last = f;
            out(WorkerMessage::Progress {
                job_id: id,
                fraction: f,
                attempt: Some(attempt),
            });
        }
    };
    let outcome = geoloop_core::worker::execute(job, &mut progress);
    if cancelled.load(Ordering::Relaxed) {
        tracing::info!(%id, "dropping outcome of a cancelled job");
        return;
    }
    out(match outcome {
        Ok(payload) => WorkerMessage::Result {
            job_id: id,
            attempt,
            payload,
        },
        Err(message) => WorkerMessage::Error {
            job_id: id,
            attempt,
            message,
        },
    });
}

/// Tracks the job a worker is running so cancellation can reach it.
#[derive(Default)]
pub struct Current(Mutex<Option<(geoloop_core::ids::JobId, CancelFlag)>>);

impl Current {
    pub fn start(&self, id: geoloop_core::ids::JobId) -> CancelFlag {
        let flag = CancelFlag::default();
        *self.0.lock() = Some((id, flag.clone()));
        flag
    }

    pub fn cancel(&self, id: geoloop_core::ids::JobId) {
        if let Some((j, f)) = &*self.0.lock() {
            if *j == id {
                f.store(true, Ordering::Relaxed);
            }
        }
    }
}

/// Starts an in-process worker talking to the orchestrator directly.
pub fn spawn_local(orch: Arc<Orchestrator>, worker_id: String, capabilities: Vec<JobKind>) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        let (tx, mut rx) = mpsc::unbounded_channel();
        let conn = {
            let (o, id) = (orch.clone(), worker_id.clone());
            match tokio::task::spawn_blocking(move || o.register(&id, capabilities, tx)).await {
                Ok(c) => c,
                Err(_) => return,
            }
        };
        let out: Outbox = {
            let (o, id) = (orch.clone(), worker_id.clone());
            Arc::new(move |m| {
                if let Err(e) = o.handle(&id, conn, m) {
                    tracing::warn!(worker_id = %id, error = %e, "message rejected");
                }
            })
        };
        let current = Arc::new(Current::default());
        let mut heartbeat: Option<tokio::task::JoinHandle<()>> = None;
        while let Some(msg) = rx.recv().await {
            match msg {
                ServerMessage::Registered {
                    heartbeat_interval_ms, ..
                } => {
                    let out = out.clone();
                    let every = Duration::from_millis(heartbeat_interval_ms.max(1));
                    heartbeat = Some(tokio::spawn(async move {
                        let mut tick = tokio::time::interval(every);
                        loop {
                            tick.tick().await;
                            let o = out.clone();
                            let _ = tokio::task::spawn_blocking(move || o(WorkerMessage::Heartbeat {})).await;
                        }
                    }));
                }
                ServerMessage::Assign { job } => {
                    let flag = current.start(job.id);
                    let out = out.clone();
                    tokio::task::spawn_blocking(move || run_assignment(&job, &out, &flag));
                }
                ServerMessage::Cancel { job_id } => current.cancel(job_id),
                ServerMessage::Error { message } => {
                    tracing::warn!(worker_id = %worker_id, %message, "server error");
                    break;
                }
            }
        }
        if let Some(h) = heartbeat {
            h.abort();
        }
        orch.disconnected(&worker_id, conn);
    })
}
