//! Application state and the domain operations behind every endpoint.

use std::collections::BTreeMap;
use std::sync::Arc;

use chrono::Utc;
use geoloop_core::annotations::{
    self, apply_correction, export_geojson, import_geojson, new_feature, plan_border_merge, Correction, DetectionSet,
    Feature, FeatureState, Revision, SetKind, Source, TileReviewEntry,
};
use geoloop_core::detect::DetectorParams;
use geoloop_core::geo::{encode_rgba_png, Raster, Sidecar, TileGrid, TileIndex, DISPLAY_TILE_SIZE};
use geoloop_core::geometry::Polygon;
use geoloop_core::ids::{AdaptationId, FeatureId, JobId, ModelId, ProjectId, RasterId, SetId};
use geoloop_core::jobs::{Job, JobKind};
use geoloop_core::metrics::{EvalMode, MetricsReport, DEFAULT_IOU_THRESHOLD};
use geoloop_core::registry::{AdaptationRecord, ModelForest, ModelNode, Task};
use geoloop_store::{id_key, Mutation, Store, View};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::bus::EventBus;
use crate::config::Config;
use crate::error::{ServiceError, ServiceResult};
use crate::orchestrator::Orchestrator;
use crate::pipeline::{
    self, feature_write, load_model, load_raster, load_set, model_write, raster_view, set_features, set_view,
    set_write, ANALYSIS_TILE,
};
use crate::records::{
    decode, encode, event, load, project_topic, revision_prefix, IdAlloc, ProjectRecord, PyramidState, RasterRecord,
    SetRecord, ADAPTATIONS, COUNTERS, FEATURES, JOBS, MODELS, MODELS_TOPIC, PROJECTS, RASTERS, REVISIONS, SETS,
};

pub struct App {
    pub config: Config,
    pub store: Arc<Store>,
    pub bus: Arc<EventBus>,
    pub orch: Arc<Orchestrator>,
    pub tokens: BTreeMap<String, String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewProject {
    pub name: String,
    #[serde(default)]
    pub members: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewModel {
    pub name: String,
    #[serde(default)]
    pub task: Option<Task>,
    #[serde(default)]
    pub parent_id: Option<ModelId>,
    #[serde(default)]
    pub params: Option<DetectorParams>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewSet {
    pub raster_id: RasterId,
    pub kind: SetKind,
    #[serde(default)]
    pub model_id: Option<ModelId>,
    #[serde(default)]
    pub name: Option<String>,
}

/// A feature submitted in raster pixel coordinates.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PixelFeature {
    pub geometry: Vec<[f64; 2]>,
    #[serde(default)]
    pub state: Option<FeatureState>,
    #[serde(default)]
    pub source: Option<Source>,
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub tile: Option<TileIndex>,
}

struct Draft {
    geometry: Polygon,
    source: Source,
    state: FeatureState,
    label: Option<String>,
    tile: Option<TileIndex>,
}

pub const DEFAULT_EXPORT_STATES: [FeatureState; 3] = [FeatureState::Proposed, FeatureState::Accepted, FeatureState::Added];

fn transparent_tile() -> Vec<u8> {
    let n = (DISPLAY_TILE_SIZE * DISPLAY_TILE_SIZE * 4) as usize;
    encode_rgba_png(&vec![0u8; n], DISPLAY_TILE_SIZE, DISPLAY_TILE_SIZE)
}

fn annotation_err(e: annotations::AnnotationError) -> ServiceError {
    match e {
        annotations::AnnotationError::UnknownFeature(id) => ServiceError::not_found("feature", id),
        annotations::AnnotationError::UnknownTile(t) => ServiceError::NotFound(format!("unknown tile {t:?}")),
        other => ServiceError::Invalid(other.to_string()),
    }
}

fn load_feature(view: &View, set: SetId, id: FeatureId) -> ServiceResult<Option<Feature>> {
    load(view, FEATURES, &crate::records::feature_key(set, id))
}

fn forest(view: &View) -> ServiceResult<ModelForest> {
    let nodes = view.scan(MODELS).map(|(_, r)| decode::<ModelNode>(r)).collect::<ServiceResult<Vec<_>>>()?;
    ModelForest::from_nodes(nodes).map_err(|e| ServiceError::Internal(e.to_string()))
}

impl App {
    pub fn user_for(&self, token: &str) -> Option<&str> {
        self.tokens.get(token).map(String::as_str)
    }

    /// Ensures the generic parent models exist.
    pub fn seed_models(&self) -> ServiceResult<()> {
        self.store.atomically(|v| {
            if v.len(MODELS) > 0 {
                return Ok::<_, ServiceError>((Vec::new(), ()));
            }
            let mut ids = IdAlloc::new();
            let mut ops = Vec::new();
            for (name, task, params) in [
                ("generic-structures", Task::Structures, DetectorParams::generic_structures()),
                ("generic-flood", Task::Flood, DetectorParams::generic_flood()),
            ] {
                let node = ModelNode {
                    id: ModelId(ids.alloc(v, "model")),
                    name: name.into(),
                    task,
                    parent_id: None,
                    params,
                    created_from: None,
                    created_at: Utc::now(),
                    deleted: false,
                };
                ops.extend(model_write(&node));
            }
            ops.extend(ids.mutations());
            Ok((ops, ()))
        })?;
        Ok(())
    }

    // Projects

    pub fn create_project(&self, user: &str, p: NewProject) -> ServiceResult<Value> {
        if p.name.trim().is_empty() {
            return Err(ServiceError::invalid("project name must be non-empty"));
        }
        let (_, rec) = self.store.atomically(|v| {
            let mut ids = IdAlloc::new();
            let mut members = vec![user.to_string()];
            for m in p.members {
                if !members.contains(&m) {
                    members.push(m);
                }
            }
            let rec = ProjectRecord {
                id: ProjectId(ids.alloc(v, "project")),
                name: p.name,
                members,
                created_by: user.to_string(),
                created_at: Utc::now(),
            };
            let mut ops = vec![
                Mutation::create(PROJECTS, id_key(rec.id.0), encode(&rec)),
                Mutation::append(&project_topic(rec.id), event("project.created", encode(&rec))),
            ];
            ops.extend(ids.mutations());
            Ok::<_, ServiceError>((ops, rec))
        })?;
        self.store.read(|v| project_view(v, &rec))
    }

    pub fn get_project(&self, id: ProjectId) -> ServiceResult<Value> {
        self.store.read(|v| {
            let rec: ProjectRecord = load(v, PROJECTS, &id_key(id.0))?.ok_or_else(|| ServiceError::not_found("project", id))?;
            project_view(v, &rec)
        })
    }

    pub fn project_exists(&self, id: ProjectId) -> bool {
        self.store.get(PROJECTS, &id_key(id.0)).is_some()
    }

    pub fn list_projects(&self) -> ServiceResult<Value> {
        self.store.read(|v| {
            let items = v
                .scan(PROJECTS)
                .map(|(_, r)| decode::<ProjectRecord>(r).and_then(|p| project_view(v, &p)))
                .collect::<ServiceResult<Vec<_>>>()?;
            Ok(Value::Array(items))
        })
    }

    // Rasters

    /// Stores an uploaded raster and queues its display pyramid.
    pub fn upload_raster(
        &self,
        project: ProjectId,
        name: Option<String>,
        image: &[u8],
        sidecar: &[u8],
    ) -> ServiceResult<(Value, Job)> {
        if !self.project_exists(project) {
            return Err(ServiceError::not_found("project", project));
        }
        let sidecar = Sidecar::parse(sidecar).map_err(|e| ServiceError::invalid(format!("sidecar: {e}")))?;
        let mut raster =
            Raster::from_png(RasterId(0), image, sidecar).map_err(|e| ServiceError::invalid(format!("image: {e}")))?;
        // Reserve the id first so the pixels can be written outside the
        // record transaction.
        let (_, id) = self.store.atomically(|v| {
            let mut ids = IdAlloc::new();
            let id = RasterId(ids.alloc(v, "raster"));
            Ok::<_, ServiceError>((ids.mutations(), id))
        })?;
        raster.meta.id = id;
        self.store.put_blob(&crate::records::blob_raster(id), raster.pixels())?;
        let (_, (rec, job)) = self.store.atomically(|v| {
            let mut ids = IdAlloc::new();
            let (job, job_ops) = self.orch.new_job_mutations(
                v,
                &mut ids,
                JobKind::TilePyramid,
                json!({ "raster_id": id }),
                Some(project),
            )?;
            let rec = RasterRecord {
                meta: raster.meta.clone(),
                project_id: project,
                name: name.clone(),
                created_at: Utc::now(),
                pyramid: PyramidState::Pending { job_id: job.id },
            };
            let mut ops = vec![
                Mutation::create(RASTERS, id_key(id.0), encode(&rec)).with_ref(PROJECTS, id_key(project.0)),
                Mutation::append(&project_topic(project), event("raster.created", raster_view(&rec))),
            ];
            ops.extend(job_ops);
            ops.extend(ids.mutations());
            Ok::<_, ServiceError>((ops, (rec, job)))
        })?;
        self.orch.dispatch();
        Ok((raster_view(&rec), job))
    }

    pub fn get_raster(&self, id: RasterId) -> ServiceResult<Value> {
        self.store.read(|v| {
            let rec = load_raster(v, id)?;
            let mut out = raster_view(&rec);
            let grid = TileGrid::new(rec.meta.width, rec.meta.height, ANALYSIS_TILE);
            out["analysis_grid"] = encode(&grid);
            Ok(out)
        })
    }

    pub fn display_tile(&self, raster: RasterId, z: u8, x: u32, y: u32) -> ServiceResult<Vec<u8>> {
        let rec = self.store.read(|v| load_raster(v, raster))?;
        match rec.pyramid {
            PyramidState::Pending { job_id } => Err(ServiceError::ConflictCode {
                code: "tile_not_ready",
                message: format!("pyramid of raster {raster} is still being built by job {job_id}"),
            }),
            PyramidState::Failed { error, .. } => Err(ServiceError::ConflictCode {
                code: "tile_failed",
                message: format!("pyramid of raster {raster} failed: {error}"),
            }),
            PyramidState::Ready { min_zoom, max_zoom, .. } => {
                if z < min_zoom || z > max_zoom {
                    return Err(ServiceError::NotFound(format!(
                        "zoom {z} outside the pyramid range {min_zoom}..={max_zoom}"
                    )));
                }
                if u64::from(x) >= 1u64 << z || u64::from(y) >= 1u64 << z {
                    return Err(ServiceError::NotFound(format!("no tile {z}/{x}/{y}")));
                }
                match self.store.get_blob(&crate::records::blob_tile(raster, z, x, y))? {
                    Some(png) => Ok(png),
                    None => Ok(transparent_tile()),
                }
            }
        }
    }

    // Models

    pub fn list_models(&self, task: Option<Task>) -> ServiceResult<Value> {
        self.store.read(|v| Ok(encode(&forest(v)?.tree(task))))
    }

    pub fn get_model(&self, id: ModelId) -> ServiceResult<Value> {
        self.store.read(|v| {
            let f = forest(v)?;
            let node = f.get(id).ok_or_else(|| ServiceError::not_found("model", id))?;
            let mut out = encode(node);
            out["depth"] = json!(f.depth(id).unwrap_or(0));
            if let Some(a) = node.created_from {
                out["adaptation"] = v.get(ADAPTATIONS, &id_key(a.0)).map(|r| r.value.clone()).unwrap_or(Value::Null);
            }
            Ok(out)
        })
    }

    pub fn create_model(&self, m: NewModel) -> ServiceResult<Value> {
        if m.name.trim().is_empty() {
            return Err(ServiceError::invalid("model name must be non-empty"));
        }
        if let Some(p) = &m.params {
            p.validate().map_err(|e| ServiceError::Invalid(e.to_string()))?;
        }
        let (_, node) = self.store.atomically(|v| {
            let f = forest(v)?;
            let parent = match m.parent_id {
                Some(p) => Some(f.get(p).ok_or_else(|| ServiceError::not_found("model", p))?.clone()),
                None => None,
            };
            let task = m.task.or(parent.as_ref().map(|p| p.task)).ok_or_else(|| ServiceError::invalid("task is required for a root model"))?;
            let params = match (&m.params, &parent) {
                (Some(p), _) => p.clone(),
                (None, Some(parent)) => parent.params.clone(),
                (None, None) => match task {
                    Task::Structures => DetectorParams::generic_structures(),
                    Task::Flood => DetectorParams::generic_flood(),
                },
            };
            let mut ids = IdAlloc::new();
            let node = ModelNode {
                id: ModelId(ids.alloc(v, "model")),
                name: m.name.clone(),
                task,
                parent_id: m.parent_id,
                params,
                created_from: None,
                created_at: Utc::now(),
                deleted: false,
            };
            f.check(&node).map_err(|e| ServiceError::Invalid(e.to_string()))?;
            let mut ops = model_write(&node);
            ops.extend(ids.mutations());
            Ok::<_, ServiceError>((ops, node))
        })?;
        Ok(encode(&node))
    }

    /// Tombstones a model; lineage stays intact.
    pub fn delete_model(&self, id: ModelId) -> ServiceResult<Value> {
        let (_, node) = self.store.atomically(|v| {
            let mut node = load_model(v, id)?;
            node.deleted = true;
            let ops = vec![
                Mutation::put(MODELS, id_key(id.0), encode(&node)),
                Mutation::append(MODELS_TOPIC, event("model.deleted", encode(&node))),
            ];
            Ok::<_, ServiceError>((ops, node))
        })?;
        Ok(encode(&node))
    }

    pub fn get_adaptation(&self, id: AdaptationId) -> ServiceResult<AdaptationRecord> {
        self.store
            .read(|v| load(v, ADAPTATIONS, &id_key(id.0)))?
            .ok_or_else(|| ServiceError::not_found("adaptation", id))
    }

    // Detection sets

    pub fn create_set(&self, s: NewSet) -> ServiceResult<Value> {
        let (_, rec) = self.store.atomically(|v| {
            let raster = load_raster(v, s.raster_id)?;
            if let Some(m) = s.model_id {
                load_model(v, m)?;
            }
            let mut ids = IdAlloc::new();
            let rec = SetRecord {
                set: DetectionSet {
                    id: SetId(ids.alloc(v, "set")),
                    raster_id: s.raster_id,
                    kind: s.kind,
                    model_id: s.model_id,
                    created_by_job: None,
                    grid: TileGrid::new(raster.meta.width, raster.meta.height, ANALYSIS_TILE),
                    reviewed: Default::default(),
                    created_at: Utc::now(),
                },
                project_id: raster.project_id,
                name: s.name.clone(),
                water_pixels: None,
            };
            let mut ops = vec![
                set_write(&rec, true),
                Mutation::append(&project_topic(rec.project_id), event("set.created", set_view(&rec, 0))),
            ];
            ops.extend(ids.mutations());
            Ok::<_, ServiceError>((ops, rec))
        })?;
        Ok(set_view(&rec, 0))
    }

    pub fn get_set(&self, id: SetId) -> ServiceResult<Value> {
        self.store.read(|v| {
            let rec = load_set(v, id)?;
            let n = v.scan_prefix(FEATURES, &crate::records::set_prefix(id)).count();
            Ok(set_view(&rec, n))
        })
    }

    pub fn list_sets(&self, raster: Option<RasterId>) -> ServiceResult<Value> {
        self.store.read(|v| {
            let mut out = Vec::new();
            for (_, r) in v.scan(SETS) {
                let rec: SetRecord = decode(r)?;
                if raster.is_some_and(|x| x != rec.set.raster_id) {
                    continue;
                }
                let n = v.scan_prefix(FEATURES, &crate::records::set_prefix(rec.set.id)).count();
                out.push(set_view(&rec, n));
            }
            Ok(Value::Array(out))
        })
    }

    pub fn list_features(
        &self,
        set: SetId,
        state: Option<FeatureState>,
        tile: Option<TileIndex>,
    ) -> ServiceResult<Vec<Feature>> {
        self.store.read(|v| {
            load_set(v, set)?;
            Ok(set_features(v, set)?
                .into_iter()
                .filter(|f| state.is_none_or(|s| f.state == s))
                .filter(|f| tile.is_none_or(|t| f.tile == t))
                .collect())
        })
    }

    /// Adds features from a GeoJSON FeatureCollection (lon/lat) or a
    /// `{"features": [...]}` list of pixel rings.
    pub fn import_features(&self, user: &str, set: SetId, body: &Value) -> ServiceResult<Vec<Feature>> {
        let meta = self.store.read(|v| {
            let rec = load_set(v, set)?;
            Ok::<_, ServiceError>(load_raster(v, rec.set.raster_id)?.meta)
        })?;
        let drafts: Vec<Draft> = if body.get("type").and_then(Value::as_str) == Some("FeatureCollection") {
            import_geojson(body, &meta)
                .map_err(annotation_err)?
                .into_iter()
                .map(|f| Draft {
                    geometry: f.geometry,
                    source: f.source,
                    state: f.state,
                    label: f.label,
                    tile: f.tile,
                })
                .collect()
        } else {
            #[derive(Deserialize)]
            #[serde(deny_unknown_fields)]
            struct Body {
                features: Vec<PixelFeature>,
            }
            let b: Body = serde_json::from_value(body.clone()).map_err(|e| ServiceError::invalid(e.to_string()))?;
            b.features
                .into_iter()
                .map(|f| {
                    let geometry = Polygon::new(f.geometry).map_err(|e| ServiceError::invalid(e.to_string()))?;
                    let source = f.source.unwrap_or(Source::Analyst);
                    let state = f.state.unwrap_or(match source {
                        Source::Analyst => FeatureState::Added,
                        Source::Model => FeatureState::Proposed,
                    });
                    Ok(Draft {
                        geometry: annotations::orient_image_cw(geometry),
                        source,
                        state,
                        label: f.label,
                        tile: f.tile,
                    })
                })
                .collect::<ServiceResult<_>>()?
        };
        for (i, d) in drafts.iter().enumerate() {
            d.geometry.validate().map_err(|e| ServiceError::invalid(format!("feature {i}: {e}")))?;
            if d.source == Source::Analyst && d.state == FeatureState::Proposed {
                return Err(ServiceError::invalid(format!("feature {i}: analyst features cannot be proposed")));
            }
        }
        let (_, out) = self.store.atomically(|v| {
            let rec = load_set(v, set)?;
            let mut ids = IdAlloc::new();
            let mut ops = Vec::new();
            let mut out = Vec::new();
            let now = Utc::now();
            for d in &drafts {
                let tile = d
                    .tile
                    .filter(|t| rec.set.grid.contains(*t))
                    .unwrap_or_else(|| rec.set.tile_of(&d.geometry));
                let o = new_feature(
                    FeatureId(ids.alloc(v, "feature")),
                    &rec.set,
                    tile,
                    d.geometry.clone(),
                    d.source,
                    d.state,
                    user,
                    d.label.clone(),
                    now,
                );
                ops.extend(feature_write(&o.feature, &o.revision, rec.project_id, true));
                out.push(o.feature);
            }
            ops.extend(ids.mutations());
            Ok::<_, ServiceError>((ops, out))
        })?;
        Ok(out)
    }

    pub fn feature_history(&self, set: SetId, id: FeatureId) -> ServiceResult<Vec<Revision>> {
        self.store.read(|v| {
            load_set(v, set)?;
            let revisions: Vec<Revision> =
                v.scan_prefix(REVISIONS, &revision_prefix(id)).map(|(_, r)| decode(r)).collect::<ServiceResult<_>>()?;
            if load_feature(v, set, id)?.is_none() {
                return Err(ServiceError::not_found("feature", id));
            }
            Ok(revisions)
        })
    }

    /// Applies corrections in order, all-or-nothing. Each item is a
    /// Correction; a missing `user` defaults to the caller.
    pub fn apply_corrections(&self, user: &str, set: SetId, items: Vec<Value>) -> ServiceResult<Vec<Feature>> {
        let mut corrections = Vec::with_capacity(items.len());
        for (i, mut item) in items.into_iter().enumerate() {
            if let Value::Object(m) = &mut item {
                m.entry("user").or_insert_with(|| Value::String(user.to_string()));
            }
            let c: Correction =
                serde_json::from_value(item).map_err(|e| ServiceError::invalid(format!("correction {i}: {e}")))?;
            corrections.push(c);
        }
        let (_, out) = self.store.atomically(|v| {
            let rec = load_set(v, set)?;
            let mut ids = IdAlloc::new();
            let mut ops = Vec::new();
            let mut current: BTreeMap<FeatureId, Feature> = BTreeMap::new();
            let mut out = Vec::new();
            for c in &corrections {
                let existing = match c.feature_id {
                    Some(fid) => match current.get(&fid) {
                        Some(f) => Some(f.clone()),
                        None => load_feature(v, set, fid)?,
                    },
                    None => None,
                };
                if let (Some(fid), None) = (c.feature_id, &existing) {
                    return Err(ServiceError::not_found("feature", fid));
                }
                let new_id = if c.feature_id.is_none() {
                    FeatureId(ids.alloc(v, "feature"))
                } else {
                    FeatureId(0)
                };
                let o = apply_correction(&rec.set, existing.as_ref(), c, new_id).map_err(annotation_err)?;
                ops.extend(feature_write(&o.feature, &o.revision, rec.project_id, existing.is_none()));
                current.insert(o.feature.id, o.feature.clone());
                out.push(o.feature);
            }
            ops.extend(ids.mutations());
            Ok::<_, ServiceError>((ops, out))
        })?;
        Ok(out)
    }

    pub fn tile_statuses(&self, set: SetId) -> ServiceResult<Value> {
        self.store.read(|v| {
            let rec = load_set(v, set)?;
            let tiles: Vec<TileReviewEntry> = rec.set.tile_statuses();
            Ok(json!({
                "set_id": set,
                "grid": rec.set.grid,
                "reviewed_fraction": rec.set.reviewed_fraction(),
                "tiles": tiles,
            }))
        })
    }

    pub fn mark_reviewed(&self, set: SetId, tile: TileIndex) -> ServiceResult<Value> {
        let (_, out) = self.store.atomically(|v| {
            let mut rec = load_set(v, set)?;
            let changed = rec.set.mark_reviewed(tile).map_err(annotation_err)?;
            let payload = json!({
                "set_id": set,
                "tile": tile,
                "status": "reviewed",
                "reviewed_fraction": rec.set.reviewed_fraction(),
            });
            let ops = if changed {
                vec![
                    set_write(&rec, false),
                    Mutation::append(&project_topic(rec.project_id), event("tile.reviewed", payload.clone())),
                ]
            } else {
                Vec::new()
            };
            Ok::<_, ServiceError>((ops, payload))
        })?;
        Ok(out)
    }

    /// Replaces proposed model features that intersect across tile borders
    /// by their union, keeping the earliest id. Returns how many features
    /// were absorbed.
    pub fn merge_border_features(&self, user: &str, set: SetId) -> ServiceResult<usize> {
        let (_, n) = self.store.atomically(|v| {
            let rec = load_set(v, set)?;
            let features = set_features(v, set)?;
            let by_id: BTreeMap<FeatureId, &Feature> = features.iter().map(|f| (f.id, f)).collect();
            let now = Utc::now();
            let mut ops = Vec::new();
            let mut absorbed = 0;
            for g in plan_border_merge(&features) {
                let mut keep = by_id[&g.keep].clone();
                keep.version += 1;
                keep.tile = rec.set.tile_of(&g.geometry);
                keep.geometry = g.geometry;
                keep.last_editor = user.to_string();
                keep.content_ts = now;
                let rev = Revision {
                    feature_id: keep.id,
                    version: keep.version,
                    action: None,
                    editor: user.to_string(),
                    timestamp: now,
                    basis_version: None,
                    geometry: keep.geometry.clone(),
                    state: keep.state,
                    superseded: false,
                };
                ops.extend(feature_write(&keep, &rev, rec.project_id, false));
                for a in g.absorbed {
                    absorbed += 1;
                    ops.push(Mutation::delete(FEATURES, crate::records::feature_key(set, a)));
                    ops.push(Mutation::append(
                        &project_topic(rec.project_id),
                        event("feature.removed", json!({ "set_id": set, "id": a, "merged_into": keep.id })),
                    ));
                }
            }
            Ok::<_, ServiceError>((ops, absorbed))
        })?;
        Ok(n)
    }

    pub fn export(&self, set: SetId, states: Option<Vec<FeatureState>>) -> ServiceResult<Value> {
        self.store.read(|v| {
            let rec = load_set(v, set)?;
            let meta = load_raster(v, rec.set.raster_id)?.meta;
            let features = set_features(v, set)?;
            let states = states.unwrap_or_else(|| DEFAULT_EXPORT_STATES.to_vec());
            Ok(export_geojson(&features, &meta, rec.set.model_id, &states))
        })
    }

    pub fn evaluate(
        &self,
        set: SetId,
        truth: SetId,
        mode: EvalMode,
        iou: Option<f64>,
        exclude_reviewed_of: Option<SetId>,
    ) -> ServiceResult<MetricsReport> {
        let iou = iou.unwrap_or(DEFAULT_IOU_THRESHOLD);
        if !(iou > 0.0 && iou <= 1.0) {
            return Err(ServiceError::invalid("iou must be in (0, 1]"));
        }
        let (grid, det, gt, filter) =
            self.store.read(|v| pipeline::evaluation_inputs(v, set, truth, exclude_reviewed_of))?;
        let d = pipeline::select_features(&grid, &det, &filter);
        let g = pipeline::select_features(&grid, &gt, &filter);
        geoloop_core::worker::evaluate(&grid, mode, iou, &d, &g).map_err(ServiceError::Internal)
    }

    // Jobs

    pub fn submit_job(&self, kind: JobKind, payload: Value) -> ServiceResult<Job> {
        self.orch.submit(kind, payload)
    }

    pub fn get_job(&self, id: JobId) -> ServiceResult<Job> {
        self.orch.get(id)
    }

    pub fn list_jobs(&self) -> ServiceResult<Vec<Job>> {
        self.store.read(|v| v.scan(JOBS).map(|(_, r)| decode(r)).collect())
    }

    pub fn counters(&self) -> Value {
        self.store.read(|v| Value::Object(v.scan(COUNTERS).map(|(k, r)| (k.clone(), r.value.clone())).collect()))
    }
}

fn project_view(view: &View, rec: &ProjectRecord) -> ServiceResult<Value> {
    let mut rasters = Vec::new();
    for (_, r) in view.scan(RASTERS) {
        let raster: RasterRecord = decode(r)?;
        if raster.project_id == rec.id {
            rasters.push(raster.meta.id);
        }
    }
    let mut sets = Vec::new();
    for (_, r) in view.scan(SETS) {
        let s: SetRecord = decode(r)?;
        if s.project_id == rec.id {
            sets.push(s.set.id);
        }
    }
    let mut v = encode(rec);
    v["raster_ids"] = json!(rasters);
    v["set_ids"] = json!(sets);
    Ok(v)
}
