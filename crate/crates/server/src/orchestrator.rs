//! Durable job queue and worker sessions.
//!
//! Jobs live in the record store; every state change is one transaction
//! that also appends a `job.updated` event. Assignment picks the oldest
//! queued job matching a worker's capabilities inside a single store
//! transaction, so concurrent pollers can never both win the same job.
//! Results are accepted only from the worker and attempt the job is
//! currently bound to.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::Utc;
use geoloop_core::geo::Resampling;
use geoloop_core::ids::JobId;
use geoloop_core::jobs::{Job, JobEvent, JobKind, JobPayload, JobState};
use geoloop_core::protocol::{ServerMessage, WorkerMessage};
use geoloop_store::{id_key, Mutation, Store, View};
use parking_lot::Mutex;
use serde::Serialize;
use serde_json::{json, Value};
use tokio::sync::mpsc::UnboundedSender;

use crate::error::{ServiceError, ServiceResult};
use crate::pipeline;
use crate::records::{self, decode, encode, event, load, IdAlloc, JobContext, JOBS, JOBS_TOPIC, JOB_CONTEXT};

#[derive(Debug, Clone)]
pub struct OrchestratorConfig {
    pub heartbeat_interval: Duration,
    pub heartbeat_timeout: Duration,
    pub max_attempts: u32,
    pub resampling: Resampling,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        Self {
            heartbeat_interval: Duration::from_secs(10),
            heartbeat_timeout: Duration::from_secs(30),
            max_attempts: geoloop_core::jobs::DEFAULT_MAX_ATTEMPTS,
            resampling: Resampling::Bilinear,
        }
    }
}

struct Session {
    conn: u64,
    capabilities: BTreeSet<JobKind>,
    last_heartbeat: Instant,
    in_flight: Option<(JobId, u32)>,
    tx: UnboundedSender<ServerMessage>,
    connected: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct OrchestratorStats {
    pub accepted_results: u64,
    pub stale_results: u64,
    pub requeued_by_sweep: u64,
    pub live_workers: usize,
}

pub struct Orchestrator {
    store: Arc<Store>,
    cfg: OrchestratorConfig,
    sessions: Mutex<BTreeMap<String, Session>>,
    dispatch_lock: Mutex<()>,
    next_conn: AtomicU64,
    started: Instant,
    runtime: tokio::runtime::Handle,
    accepted: AtomicU64,
    stale: AtomicU64,
    requeued: AtomicU64,
}

/// Public view of a job, as carried by `job.updated` events.
pub fn job_summary(job: &Job) -> Value {
    json!({
        "id": job.id,
        "kind": job.kind,
        "state": job.state,
        "attempts": job.attempts,
        "max_attempts": job.max_attempts,
        "progress": job.progress,
        "assigned_worker": job.assigned_worker,
        "error": job.error,
        "result": job.result,
    })
}

/// Mutations persisting `job` and announcing it.
pub fn job_write(job: &Job, ctx: &JobContext) -> Vec<Mutation> {
    let ev = event("job.updated", job_summary(job));
    let mut ops = vec![
        Mutation::put(JOBS, id_key(job.id.0), encode(job)),
        Mutation::append(JOBS_TOPIC, ev.clone()),
    ];
    if let Some(p) = ctx.project_id {
        ops.push(Mutation::append(&records::project_topic(p), ev));
    }
    ops
}

fn load_job(view: &View, id: JobId) -> ServiceResult<(Job, JobContext)> {
    let job: Job = load(view, JOBS, &id_key(id.0))?.ok_or_else(|| ServiceError::not_found("job", id))?;
    let ctx: JobContext = load(view, JOB_CONTEXT, &id_key(id.0))?.unwrap_or_default();
    Ok((job, ctx))
}

fn illegal(e: geoloop_core::jobs::JobError) -> ServiceError {
    ServiceError::Conflict(e.to_string())
}

impl Orchestrator {
    /// Must be called from within a tokio runtime.
    pub fn new(store: Arc<Store>, cfg: OrchestratorConfig) -> Arc<Self> {
        Arc::new(Self {
            store,
            cfg,
            sessions: Mutex::new(BTreeMap::new()),
            dispatch_lock: Mutex::new(()),
            next_conn: AtomicU64::new(1),
            started: Instant::now(),
            runtime: tokio::runtime::Handle::current(),
            accepted: AtomicU64::new(0),
            stale: AtomicU64::new(0),
            requeued: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &OrchestratorConfig {
        &self.cfg
    }

    pub fn stats(&self) -> OrchestratorStats {
        OrchestratorStats {
            accepted_results: self.accepted.load(Ordering::Relaxed),
            stale_results: self.stale.load(Ordering::Relaxed),
            requeued_by_sweep: self.requeued.load(Ordering::Relaxed),
            live_workers: self.sessions.lock().values().filter(|s| s.connected).count(),
        }
    }

    /// Job creation as part of a larger transaction.
    pub fn job_mutations(
        &self,
        view: &View,
        ids: &mut IdAlloc,
        kind: JobKind,
        payload: Value,
    ) -> ServiceResult<(Job, Vec<Mutation>)> {
        let parsed = JobPayload::parse(kind, &payload).map_err(|e| ServiceError::Invalid(e.to_string()))?;
        let project_id = pipeline::validate_submission(view, &parsed)?;
        self.new_job_mutations(view, ids, kind, payload, project_id)
    }

    /// Like [`Self::job_mutations`] for callers that create the job's
    /// inputs in the same transaction and have validated them already.
    pub fn new_job_mutations(
        &self,
        view: &View,
        ids: &mut IdAlloc,
        kind: JobKind,
        payload: Value,
        project_id: Option<geoloop_core::ids::ProjectId>,
    ) -> ServiceResult<(Job, Vec<Mutation>)> {
        JobPayload::parse(kind, &payload).map_err(|e| ServiceError::Invalid(e.to_string()))?;
        let id = JobId(ids.alloc(view, "job"));
        let job = Job::new(id, kind, payload, self.cfg.max_attempts, Utc::now());
        let ctx = JobContext {
            project_id,
            corrected_tiles: Vec::new(),
        };
        let mut ops = vec![Mutation::put(JOB_CONTEXT, id_key(id.0), encode(&ctx))];
        ops.extend(job_write(&job, &ctx));
        Ok((job, ops))
    }

    pub fn submit(self: &Arc<Self>, kind: JobKind, payload: Value) -> ServiceResult<Job> {
        let (_, job) = self.store.atomically(|v| {
            let mut ids = IdAlloc::new();
            let (job, mut ops) = self.job_mutations(v, &mut ids, kind, payload)?;
            ops.extend(ids.mutations());
            Ok::<_, ServiceError>((ops, job))
        })?;
        self.dispatch();
        Ok(job)
    }

    pub fn get(&self, id: JobId) -> ServiceResult<Job> {
        self.store.read(|v| load_job(v, id).map(|(j, _)| j))
    }

    /// Loads a job, lets `f` change it, and commits the result together with
    /// any extra mutations `f` returns. `f` returning `None` leaves the job
    /// untouched.
    fn update_job<T>(
        &self,
        id: JobId,
        f: impl FnOnce(&View, &mut Job, &JobContext) -> ServiceResult<Option<(Vec<Mutation>, T)>>,
    ) -> ServiceResult<Option<(Job, T)>> {
        let (_, out) = self.store.atomically(|v| {
            let (mut job, ctx) = load_job(v, id)?;
            match f(v, &mut job, &ctx)? {
                None => Ok::<_, ServiceError>((Vec::new(), None)),
                Some((mut extra, t)) => {
                    extra.extend(job_write(&job, &ctx));
                    Ok((extra, Some((job, t))))
                }
            }
        })?;
        Ok(out)
    }

    /// Moves the oldest queued job whose kind the worker can run to
    /// `assigned`, bound to `worker`.
    pub fn assign_next(&self, worker: &str, capabilities: &BTreeSet<JobKind>) -> ServiceResult<Option<Job>> {
        let (_, job) = self.store.atomically(|v| {
            let candidate = v.scan(JOBS).find(|(_, r)| {
                r.value.get("state").and_then(Value::as_str) == Some("queued")
                    && r.value
                        .get("kind")
                        .and_then(|k| serde_json::from_value::<JobKind>(k.clone()).ok())
                        .is_some_and(|k| capabilities.contains(&k))
            });
            let Some((_, rec)) = candidate else {
                return Ok::<_, ServiceError>((Vec::new(), None));
            };
            let mut job: Job = decode(rec)?;
            let ctx: JobContext = load(v, JOB_CONTEXT, &id_key(job.id.0))?.unwrap_or_default();
            job.apply(
                JobEvent::Assign {
                    worker: worker.to_string(),
                },
                Utc::now(),
            )
            .map_err(illegal)?;
            Ok((job_write(&job, &ctx), Some(job)))
        })?;
        Ok(job)
    }

    /// Registers a worker session and returns its connection number. A
    /// worker id that registers again loses whatever it held before.
    pub fn register(
        self: &Arc<Self>,
        worker_id: &str,
        capabilities: Vec<JobKind>,
        tx: UnboundedSender<ServerMessage>,
    ) -> u64 {
        let conn = self.next_conn.fetch_add(1, Ordering::Relaxed);
        let _ = tx.send(ServerMessage::Registered {
            worker_id: worker_id.to_string(),
            heartbeat_interval_ms: self.cfg.heartbeat_interval.as_millis() as u64,
        });
        self.sessions.lock().insert(
            worker_id.to_string(),
            Session {
                conn,
                capabilities: capabilities.into_iter().collect(),
                last_heartbeat: Instant::now(),
                in_flight: None,
                tx,
                connected: true,
            },
        );
        // A registering worker holds nothing; whatever is still bound to
        // its id belongs to an earlier connection or process.
        self.fail_jobs_of(worker_id, &format!("worker {worker_id} registered again"));
        tracing::info!(worker_id, conn, "worker registered");
        self.dispatch();
        conn
    }

    /// The connection closed. Its jobs stay bound until the heartbeat
    /// timeout expires.
    pub fn disconnected(&self, worker_id: &str, conn: u64) {
        if let Some(s) = self.sessions.lock().get_mut(worker_id) {
            if s.conn == conn {
                s.connected = false;
            }
        }
        tracing::info!(worker_id, conn, "worker disconnected");
    }

    fn session_matches(&self, worker_id: &str, conn: u64) -> bool {
        self.sessions.lock().get(worker_id).is_some_and(|s| s.conn == conn)
    }

    fn clear_in_flight(&self, worker_id: &str, job: JobId) {
        if let Some(s) = self.sessions.lock().get_mut(worker_id) {
            if s.in_flight.is_some_and(|(j, _)| j == job) {
                s.in_flight = None;
            }
        }
    }

    /// Processes one message from a registered worker connection.
    pub fn handle(self: &Arc<Self>, worker_id: &str, conn: u64, msg: WorkerMessage) -> ServiceResult<()> {
        if !self.session_matches(worker_id, conn) {
            if matches!(msg, WorkerMessage::Result { .. }) {
                self.stale.fetch_add(1, Ordering::Relaxed);
            }
            return Err(ServiceError::Conflict(format!("connection {conn} of {worker_id} is no longer current")));
        }
        match msg {
            WorkerMessage::Register { .. } => Err(ServiceError::invalid("already registered")),
            WorkerMessage::Heartbeat {} => {
                if let Some(s) = self.sessions.lock().get_mut(worker_id) {
                    s.last_heartbeat = Instant::now();
                }
                Ok(())
            }
            WorkerMessage::Progress {
                job_id,
                fraction,
                attempt,
            } => {
                self.update_job(job_id, |_, job, _| {
                    let attempt = attempt.unwrap_or(job.current_attempt());
                    if !job.is_bound_to(worker_id, attempt) {
                        return Ok(None);
                    }
                    let mut changed = false;
                    if job.state == JobState::Assigned {
                        job.apply(JobEvent::Start, Utc::now()).map_err(illegal)?;
                        changed = true;
                    }
                    changed |= job.record_progress(fraction).is_some();
                    Ok(changed.then(|| (Vec::new(), ())))
                })?;
                Ok(())
            }
            WorkerMessage::Result {
                job_id,
                attempt,
                payload,
            } => {
                self.accept_result(worker_id, job_id, attempt, payload)?;
                self.clear_in_flight(worker_id, job_id);
                self.dispatch();
                Ok(())
            }
            WorkerMessage::Error {
                job_id,
                attempt,
                message,
            } => {
                let failed = self.fail_attempt(job_id, worker_id, attempt, &message)?;
                if !failed {
                    self.stale.fetch_add(1, Ordering::Relaxed);
                }
                self.clear_in_flight(worker_id, job_id);
                self.dispatch();
                Ok(())
            }
        }
    }

    /// Returns whether the attempt was current and has been failed.
    fn fail_attempt(&self, job_id: JobId, worker: &str, attempt: u32, message: &str) -> ServiceResult<bool> {
        let out = self.update_job(job_id, |v, job, _| {
            if !job.is_bound_to(worker, attempt) {
                return Ok(None);
            }
            job.apply(
                JobEvent::FailAttempt {
                    error: message.to_string(),
                },
                Utc::now(),
            )
            .map_err(illegal)?;
            let extra = if job.state == JobState::Failed {
                pipeline::on_job_failed(v, job)?
            } else {
                Vec::new()
            };
            Ok(Some((extra, ())))
        })?;
        Ok(out.is_some())
    }

    fn accept_result(&self, worker: &str, job_id: JobId, attempt: u32, payload: Value) -> ServiceResult<bool> {
        let job = self.get(job_id)?;
        if !job.is_bound_to(worker, attempt) {
            self.stale.fetch_add(1, Ordering::Relaxed);
            tracing::info!(%job_id, worker, attempt, "discarding result of a stale attempt");
            return Ok(false);
        }
        let prepared = match pipeline::prepare(&self.store, &job, payload) {
            Ok(p) => p,
            Err(e) => {
                self.fail_attempt(job_id, worker, attempt, &format!("rejected result: {e}"))?;
                return Ok(false);
            }
        };
        let outcome = self.update_job(job_id, |v, job, ctx| {
            if !job.is_bound_to(worker, attempt) {
                return Ok(None);
            }
            let mut ids = IdAlloc::new();
            let (summary, mut ops) = match pipeline::ingest(v, &mut ids, job, ctx, prepared) {
                Ok(x) => x,
                Err(ServiceError::Invalid(m)) | Err(ServiceError::NotFound(m)) => {
                    return Ok(Some((Vec::new(), Err(m))));
                }
                Err(e) => return Err(e),
            };
            let now = Utc::now();
            if job.state == JobState::Assigned {
                job.apply(JobEvent::Start, now).map_err(illegal)?;
            }
            job.apply(JobEvent::Succeed { result: summary }, now).map_err(illegal)?;
            ops.extend(ids.mutations());
            Ok(Some((ops, Ok(()))))
        })?;
        match outcome {
            None => {
                self.stale.fetch_add(1, Ordering::Relaxed);
                Ok(false)
            }
            Some((_, Err(m))) => {
                self.fail_attempt(job_id, worker, attempt, &format!("rejected result: {m}"))?;
                Ok(false)
            }
            Some((_, Ok(()))) => {
                self.accepted.fetch_add(1, Ordering::Relaxed);
                Ok(true)
            }
        }
    }

    /// Fails every attempt bound to `worker`. Returns the affected job ids.
    fn fail_jobs_of(&self, worker: &str, reason: &str) -> Vec<JobId> {
        let bound: Vec<(JobId, u32)> = self.store.read(|v| {
            v.scan(JOBS)
                .filter_map(|(_, r)| decode::<Job>(r).ok())
                .filter(|j| matches!(j.state, JobState::Assigned | JobState::Running))
                .filter(|j| j.assigned_worker.as_deref() == Some(worker))
                .map(|j| (j.id, j.current_attempt()))
                .collect()
        });
        bound
            .into_iter()
            .filter_map(|(id, attempt)| match self.fail_attempt(id, worker, attempt, reason) {
                Ok(true) => Some(id),
                Ok(false) => None,
                Err(e) => {
                    tracing::warn!(%id, error = %e, "could not fail attempt");
                    None
                }
            })
            .collect()
    }

    /// Requeues (or fails, at the attempt limit) jobs held by workers whose
    /// last heartbeat is older than the timeout. Jobs bound to workers this
    /// process has never seen are treated the same once a full timeout has
    /// passed since startup.
    pub fn sweep(self: &Arc<Self>) -> Vec<JobId> {
        self.sweep_at(Instant::now())
    }

    pub fn sweep_at(self: &Arc<Self>, now: Instant) -> Vec<JobId> {
        let timeout = self.cfg.heartbeat_timeout;
        let live: BTreeSet<String> = {
            let mut sessions = self.sessions.lock();
            sessions.retain(|id, s| {
                let alive = now.saturating_duration_since(s.last_heartbeat) <= timeout;
                if !alive {
                    tracing::warn!(worker_id = %id, "worker missed heartbeats");
                }
                alive
            });
            sessions.keys().cloned().collect()
        };
        let orphans_expired = now.saturating_duration_since(self.started) > timeout;
        let stuck: Vec<(JobId, String, u32)> = self.store.read(|v| {
            v.scan(JOBS)
                .filter(|(_, r)| matches!(r.value.get("state").and_then(Value::as_str), Some("assigned" | "running")))
                .filter_map(|(_, r)| decode::<Job>(r).ok())
                .filter_map(|j| {
                    let w = j.assigned_worker.clone()?;
                    (!live.contains(&w) && orphans_expired).then(|| (j.id, w, j.current_attempt()))
                })
                .collect()
        });
        let mut requeued = Vec::new();
        for (id, worker, attempt) in stuck {
            match self.fail_attempt(id, &worker, attempt, &format!("worker {worker} missed heartbeats")) {
                Ok(true) => requeued.push(id),
                Ok(false) => {}
                Err(e) => tracing::warn!(%id, error = %e, "sweep could not fail attempt"),
            }
        }
        if !requeued.is_empty() {
            self.requeued.fetch_add(requeued.len() as u64, Ordering::Relaxed);
            self.dispatch();
        }
        requeued
    }

    pub fn cancel(self: &Arc<Self>, id: JobId) -> ServiceResult<Job> {
        let out = self.update_job(id, |v, job, _| {
            if job.state.is_terminal() {
                return Err(ServiceError::ConflictCode {
                    code: "job_terminal",
                    message: format!("job {id} is already {:?}", job.state).to_lowercase(),
                });
            }
            let holder = job.assigned_worker.clone();
            job.apply(JobEvent::Cancel, Utc::now()).map_err(illegal)?;
            Ok(Some((pipeline::on_job_failed(v, job)?, holder)))
        })?;
        let (job, holder) = out.expect("cancel always writes");
        if let Some(w) = holder {
            let mut sessions = self.sessions.lock();
            if let Some(s) = sessions.get_mut(&w) {
                if s.in_flight.is_some_and(|(j, _)| j == id) {
                    s.in_flight = None;
                }
                let _ = s.tx.send(ServerMessage::Cancel { job_id: id });
            }
        }
        self.dispatch();
        Ok(job)
    }

    /// Hands queued jobs to idle connected workers.
    pub fn dispatch(self: &Arc<Self>) {
        let _guard = self.dispatch_lock.lock();
        let idle: Vec<(String, u64, BTreeSet<JobKind>)> = {
            let sessions = self.sessions.lock();
            let mut v: Vec<_> = sessions
                .iter()
                .filter(|(_, s)| s.connected && s.in_flight.is_none())
                .map(|(id, s)| (id.clone(), s.conn, s.capabilities.clone()))
                .collect();
            v.sort_by_key(|(_, conn, _)| *conn);
            v
        };
        for (worker, conn, caps) in idle {
            let job = match self.assign_next(&worker, &caps) {
                Ok(Some(job)) => job,
                Ok(None) => continue,
                Err(e) => {
                    tracing::error!(error = %e, "assignment failed");
                    return;
                }
            };
            let attempt = job.current_attempt();
            let tx = {
                let mut sessions = self.sessions.lock();
                match sessions.get_mut(&worker) {
                    Some(s) if s.conn == conn => {
                        s.in_flight = Some((job.id, attempt));
                        Some(s.tx.clone())
                    }
                    _ => None,
                }
            };
            // A vanished session leaves the job bound; the sweep requeues it.
            let Some(tx) = tx else { continue };
            let this = self.clone();
            self.runtime.spawn(async move {
                let store = this.store.clone();
                let resampling = this.cfg.resampling;
                let j = job.clone();
                let materialized =
                    tokio::task::spawn_blocking(move || pipeline::materialize(&store, &j, resampling)).await;
                match materialized {
                    Ok(Ok(assigned)) => {
                        let _ = tx.send(ServerMessage::Assign {
                            job: Box::new(assigned),
                        });
                    }
                    Ok(Err(e)) => {
                        let msg = format!("could not prepare inputs: {e}");
                        if let Err(e) = this.fail_attempt(job.id, &worker, attempt, &msg) {
                            tracing::error!(error = %e, "failing attempt");
                        }
                        this.clear_in_flight(&worker, job.id);
                        this.dispatch();
                    }
                    Err(e) => tracing::error!(error = %e, "materialization task panicked"),
                }
            });
        }
    }

    /// Runs the heartbeat sweep until the returned task is aborted.
    pub fn spawn_sweeper(self: &Arc<Self>, every: Duration) -> tokio::task::JoinHandle<()> {
        let this = self.clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(every);
            loop {
                tick.tick().await;
                let o = this.clone();
                let _ = tokio::task::spawn_blocking(move || o.sweep()).await;
            }
        })
    }
}
