//! Persisted record types and table layout.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use geoloop_core::annotations::DetectionSet;
use geoloop_core::geo::{RasterMeta, TileIndex};
use geoloop_core::ids::{FeatureId, JobId, ProjectId, RasterId, SetId};
use geoloop_store::{id_key, Mutation, Record, View};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{ServiceError, ServiceResult};

pub const PROJECTS: &str = "projects";
pub const RASTERS: &str = "rasters";
pub const MODELS: &str = "models";
pub const ADAPTATIONS: &str = "adaptations";
pub const SETS: &str = "sets";
/// Keyed `{set}/{feature}` so a set's features form one key range.
pub const FEATURES: &str = "features";
/// Keyed `{feature}/{version}`.
pub const REVISIONS: &str = "revisions";
pub const JOBS: &str = "jobs";
pub const JOB_CONTEXT: &str = "job_context";
pub const COUNTERS: &str = "counters";

pub const JOBS_TOPIC: &str = "jobs";
/// Model registry changes; models are shared across projects.
pub const MODELS_TOPIC: &str = "models";

pub fn project_topic(id: ProjectId) -> String {
    format!("project.{id}")
}

pub fn feature_key(set: SetId, feature: FeatureId) -> String {
    format!("{}/{}", id_key(set.0), id_key(feature.0))
}

pub fn set_prefix(set: SetId) -> String {
    format!("{}/", id_key(set.0))
}

pub fn revision_key(feature: FeatureId, version: u64) -> String {
    format!("{}/{}", id_key(feature.0), id_key(version))
}

pub fn revision_prefix(feature: FeatureId) -> String {
    format!("{}/", id_key(feature.0))
}

pub fn blob_raster(id: RasterId) -> String {
    format!("rasters/{id}.bin")
}

pub fn blob_tile(id: RasterId, z: u8, x: u32, y: u32) -> String {
    format!("tiles/{id}/{z}/{x}/{y}.png")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectRecord {
    pub id: ProjectId,
    pub name: String,
    pub members: Vec<String>,
    pub created_by: String,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum PyramidState {
    Pending { job_id: JobId },
    Ready { job_id: JobId, min_zoom: u8, max_zoom: u8 },
    Failed { job_id: JobId, error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterRecord {
    pub meta: RasterMeta,
    pub project_id: ProjectId,
    pub name: Option<String>,
    pub created_at: DateTime<Utc>,
    pub pyramid: PyramidState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetRecord {
    #[serde(flatten)]
    pub set: DetectionSet,
    pub project_id: ProjectId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Mask size reported by flood inference.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub water_pixels: Option<u64>,
}

/// Server-side facts about a job that are not part of its payload.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JobContext {
    pub project_id: Option<ProjectId>,
    /// Reviewed tiles handed to the current adapt attempt.
    #[serde(default)]
    pub corrected_tiles: Vec<TileIndex>,
}

pub fn decode<T: DeserializeOwned>(rec: &Record) -> ServiceResult<T> {
    serde_json::from_value(rec.value.clone())
        .map_err(|e| ServiceError::Internal(format!("corrupt record: {e}")))
}

pub fn load<T: DeserializeOwned>(view: &View, table: &str, key: &str) -> ServiceResult<Option<T>> {
    view.get(table, key).map(decode).transpose()
}

pub fn encode<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("records serialize")
}

/// Topic event body: `{"type", "payload", "at"}`.
pub fn event(kind: &str, payload: Value) -> Value {
    json!({ "type": kind, "payload": payload, "at": Utc::now() })
}

/// Allocates ids from per-kind counters within one transaction.
pub struct IdAlloc {
    next: BTreeMap<&'static str, u64>,
}

impl IdAlloc {
    pub fn new() -> Self {
        Self { next: BTreeMap::new() }
    }

    pub fn alloc(&mut self, view: &View, kind: &'static str) -> u64 {
        let n = self.next.entry(kind).or_insert_with(|| {
            view.get(COUNTERS, kind).and_then(|r| r.value.as_u64()).unwrap_or(0)
        });
        *n += 1;
        *n
    }

    pub fn mutations(self) -> Vec<Mutation> {
        self.next
            .into_iter()
            .map(|(k, v)| Mutation::put(COUNTERS, k, json!(v)))
            .collect()
    }
}

impl Default for IdAlloc {
    fn default() -> Self {
        Self::new()
    }
}
