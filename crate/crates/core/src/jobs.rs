//! Jobs and their state machine.
//!
//! ```text
//! queued -> assigned -> running -> succeeded
//!              |           |
//!              +-----+-----+-> (failed attempt) -> queued | failed
//! any non-terminal -> cancelled
//! ```
//!
//! `attempts` counts failed attempts. The attempt currently bound to a
//! worker is number `attempts + 1`.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::ids::{JobId, ModelId, RasterId, SetId};
use crate::metrics::EvalMode;

pub const DEFAULT_MAX_ATTEMPTS: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    TilePyramid,
    Infer,
    Adapt,
    Evaluate,
}

impl JobKind {
    pub const ALL: [JobKind; 4] = [JobKind::TilePyramid, JobKind::Infer, JobKind::Adapt, JobKind::Evaluate];

    pub fn as_str(self) -> &'static str {
        match self {
            JobKind::TilePyramid => "tile_pyramid",
            JobKind::Infer => "infer",
            JobKind::Adapt => "adapt",
            JobKind::Evaluate => "evaluate",
        }
    }
}

impl std::str::FromStr for JobKind {
    type Err = JobError;

    fn from_str(s: &str) -> Result<Self, JobError> {
        JobKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| JobError::InvalidPayload(format!("unknown job kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Assigned,
    Running,
    Succeeded,
    Failed,
    Cancelled,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Succeeded | JobState::Failed | JobState::Cancelled)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum JobEvent {
    Assign { worker: String },
    Start,
    Succeed { result: Value },
    FailAttempt { error: String },
    Cancel,
}

impl JobEvent {
    fn name(&self) -> &'static str {
        match self {
            JobEvent::Assign { .. } => "assign",
            JobEvent::Start => "start",
            JobEvent::Succeed { .. } => "succeed",
            JobEvent::FailAttempt { .. } => "fail_attempt",
            JobEvent::Cancel => "cancel",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub at: DateTime<Utc>,
    #[serde(flatten)]
    pub event: JobEvent,
    /// State after the event.
    pub state: JobState,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum JobError {
    #[error("invalid payload: {0}")]
    InvalidPayload(String),
    #[error("illegal transition: {event} in state {from:?}")]
    IllegalTransition { from: JobState, event: &'static str },
}

/// Kind-specific job parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum JobPayload {
    TilePyramid(TilePyramidPayload),
    Infer(InferPayload),
    Adapt(AdaptPayload),
    Evaluate(EvaluatePayload),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TilePyramidPayload {
    pub raster_id: RasterId,
    #[serde(default)]
    pub min_zoom: Option<u8>,
    #[serde(default)]
    pub max_zoom: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferPayload {
    pub model_id: ModelId,
    pub raster_id: RasterId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptPayload {
    pub parent_model_id: ModelId,
    pub set_id: SetId,
    #[serde(default)]
    pub name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluatePayload {
    pub set_id: SetId,
    pub truth_set_id: SetId,
    #[serde(default)]
    pub mode: EvalMode,
    #[serde(default)]
    pub iou_threshold: Option<f64>,
    /// Restricts evaluation to tiles not reviewed in this set (the held-out
    /// tiles of an adaptation run).
    #[serde(default)]
    pub exclude_reviewed_of: Option<SetId>,
}

impl JobPayload {
    pub fn parse(kind: JobKind, payload: &Value) -> Result<JobPayload, JobError> {
        let err = |e: serde_json::Error| JobError::InvalidPayload(format!("{}: {e}", kind.as_str()));
        let p = match kind {
            JobKind::TilePyramid => {
                let p: TilePyramidPayload = serde_json::from_value(payload.clone()).map_err(err)?;
                if let (Some(a), Some(b)) = (p.min_zoom, p.max_zoom) {
                    if a > b {
                        return Err(JobError::InvalidPayload("min_zoom exceeds max_zoom".into()));
                    }
                }
                JobPayload::TilePyramid(p)
            }
            JobKind::Infer => JobPayload::Infer(serde_json::from_value(payload.clone()).map_err(err)?),
            JobKind::Adapt => JobPayload::Adapt(serde_json::from_value(payload.clone()).map_err(err)?),
            JobKind::Evaluate => {
                let p: EvaluatePayload = serde_json::from_value(payload.clone()).map_err(err)?;
                if p.iou_threshold.is_some_and(|t| !(t > 0.0 && t <= 1.0)) {
                    return Err(JobError::InvalidPayload("iou_threshold must be in (0, 1]".into()));
                }
                JobPayload::Evaluate(p)
            }
        };
        Ok(p)
    }

    pub fn kind(&self) -> JobKind {
        match self {
            JobPayload::TilePyramid(_) => JobKind::TilePyramid,
            JobPayload::Infer(_) => JobKind::Infer,
            JobPayload::Adapt(_) => JobKind::Adapt,
            JobPayload::Evaluate(_) => JobKind::Evaluate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: JobId,
    pub kind: JobKind,
    pub payload: Value,
    pub state: JobState,
    pub attempts: u32,
    pub max_attempts: u32,
    pub assigned_worker: Option<String>,
    pub submitted_at: DateTime<Utc>,
    pub history: Vec<Transition>,
    /// Last progress fraction reported for the current attempt; never
    /// decreases within a job.
    pub progress: f64,
    pub result: Option<Value>,
    pub error: Option<String>,
}

impl Job {
    pub fn new(id: JobId, kind: JobKind, payload: Value, max_attempts: u32, now: DateTime<Utc>) -> Self {
        Self {
            id,
            kind,
            payload,
            state: JobState::Queued,
            attempts: 0,
            max_attempts,
            assigned_worker: None,
            submitted_at: now,
            history: Vec::new(),
            progress: 0.0,
            result: None,
            error: None,
        }
    }

    /// Attempt number bound to the current assignment.
    pub fn current_attempt(&self) -> u32 {
        self.attempts + 1
    }

    /// Whether `(worker, attempt)` is the live binding of this job.
    pub fn is_bound_to(&self, worker: &str, attempt: u32) -> bool {
        matches!(self.state, JobState::Assigned | JobState::Running)
            && self.assigned_worker.as_deref() == Some(worker)
            && attempt == self.current_attempt()
    }

    /// State after `event`, without mutating.
    pub fn next_state(&self, event: &JobEvent) -> Result<JobState, JobError> {
        use JobState::*;
        let illegal = || JobError::IllegalTransition {
            from: self.state,
            event: event.name(),
        };
        match (self.state, event) {
            (Queued, JobEvent::Assign { .. }) => Ok(Assigned),
            (Assigned, JobEvent::Start) => Ok(Running),
            (Running, JobEvent::Succeed { .. }) => Ok(Succeeded),
            (Assigned | Running, JobEvent::FailAttempt { .. }) => {
                if self.attempts + 1 < self.max_attempts {
                    Ok(Queued)
                } else {
                    Ok(Failed)
                }
            }
            (s, JobEvent::Cancel) if !s.is_terminal() => Ok(Cancelled),
            _ => Err(illegal()),
        }
    }

    pub fn apply(&mut self, event: JobEvent, now: DateTime<Utc>) -> Result<JobState, JobError> {
        let next = self.next_state(&event)?;
        match &event {
            JobEvent::Assign { worker } => {
                self.assigned_worker = Some(worker.clone());
            }
            JobEvent::Start => {}
            JobEvent::Succeed { result } => {
                self.result = Some(result.clone());
                self.progress = 1.0;
            }
            JobEvent::FailAttempt { error } => {
                self.attempts += 1;
                self.assigned_worker = None;
                if next == JobState::Failed {
                    self.error = Some(format!("attempts exhausted: {error}"));
                } else {
                    self.error = Some(error.clone());
                }
            }
            JobEvent::Cancel => {
                self.assigned_worker = None;
            }
        }
        self.state = next;
        self.history.push(Transition {
            at: now,
            event,
            state: next,
        });
        Ok(next)
    }

    /// Rebuilds a job from its submission data and transition history.
    pub fn replay(&self) -> Result<Job, JobError> {
        let mut j = Job::new(self.id, self.kind, self.payload.clone(), self.max_attempts, self.submitted_at);
        for t in &self.history {
            j.apply(t.event.clone(), t.at)?;
        }
        j.progress = self.progress;
        Ok(j)
    }

    /// Records progress; returns the value to publish if it advanced.
    pub fn record_progress(&mut self, fraction: f64) -> Option<f64> {
        if !fraction.is_finite() {
            return None;
        }
        let f = fraction.clamp(0.0, 1.0);
        if f > self.progress {
            self.progress = f;
            Some(f)
        } else {
            None
        }
    }
}
