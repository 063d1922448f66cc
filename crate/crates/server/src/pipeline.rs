//! Per-kind job plumbing: submission checks, input materialization for
//! workers, and result ingestion into domain records.

use std::collections::{BTreeMap, BTreeSet};

use chrono::Utc;
use geoloop_core::adapt::{AdaptOutcome, SearchSpace};
use geoloop_core::annotations::{
    new_feature, plan_border_merge, training_truth, DetectionSet, Feature, FeatureState, SetKind, Source, TileFilter,
};
use geoloop_core::geo::{extract_tile, pyramid_zooms, Raster, Resampling, TileGrid};
use geoloop_core::ids::{AdaptationId, FeatureId, ModelId, ProjectId, RasterId, SetId};
use geoloop_core::jobs::{Job, JobPayload};
use geoloop_core::metrics::{MetricsReport, DEFAULT_IOU_THRESHOLD};
use geoloop_core::protocol::{
    b64_decode, b64_encode, AssignedJob, FeatureData, InferResult, JobInputs, PyramidResult, RasterData, TileData,
};
use geoloop_core::registry::{AdaptationRecord, ModelNode, Task};
use geoloop_store::{id_key, Mutation, Store, View};
use serde_json::{json, Value};

use crate::error::{ServiceError, ServiceResult};
use crate::records::{
    self, blob_raster, blob_tile, decode, encode, event, load, project_topic, IdAlloc, JobContext, PyramidState,
    RasterRecord, SetRecord, ADAPTATIONS, FEATURES, JOBS, JOB_CONTEXT, MODELS, RASTERS, REVISIONS, SETS,
};

/// Analysis tile size in raster pixels.
pub const ANALYSIS_TILE: u32 = 300;

pub fn load_raster(view: &View, id: RasterId) -> ServiceResult<RasterRecord> {
    load(view, RASTERS, &id_key(id.0))?.ok_or_else(|| ServiceError::not_found("raster", id))
}

pub fn load_model(view: &View, id: ModelId) -> ServiceResult<ModelNode> {
    load(view, MODELS, &id_key(id.0))?.ok_or_else(|| ServiceError::not_found("model", id))
}

pub fn load_set(view: &View, id: SetId) -> ServiceResult<SetRecord> {
    load(view, SETS, &id_key(id.0))?.ok_or_else(|| ServiceError::not_found("set", id))
}

pub fn set_features(view: &View, id: SetId) -> ServiceResult<Vec<Feature>> {
    view.scan_prefix(FEATURES, &records::set_prefix(id)).map(|(_, r)| decode(r)).collect()
}

fn live_model(view: &View, id: ModelId) -> ServiceResult<ModelNode> {
    let m = load_model(view, id)?;
    if m.deleted {
        return Err(ServiceError::invalid(format!("model {id} is deleted")));
    }
    Ok(m)
}

/// Checks a submission against current records; returns the owning project.
pub fn validate_submission(view: &View, payload: &JobPayload) -> ServiceResult<Option<ProjectId>> {
    match payload {
        JobPayload::TilePyramid(p) => Ok(Some(load_raster(view, p.raster_id)?.project_id)),
        JobPayload::Infer(p) => {
            live_model(view, p.model_id)?;
            Ok(Some(load_raster(view, p.raster_id)?.project_id))
        }
        JobPayload::Adapt(p) => {
            let parent = live_model(view, p.parent_model_id)?;
            if parent.task != Task::Structures {
                return Err(ServiceError::invalid("adaptation is only defined for structure detection models"));
            }
            let set = load_set(view, p.set_id)?;
            if set.set.reviewed.is_empty() {
                return Err(ServiceError::invalid(format!("set {} has no reviewed tiles", p.set_id)));
            }
            Ok(Some(set.project_id))
        }
        JobPayload::Evaluate(p) => {
            let (det, truth) = evaluation_sets(view, p.set_id, p.truth_set_id, p.exclude_reviewed_of)?;
            let _ = truth;
            Ok(Some(det.project_id))
        }
    }
}

/// Loads and cross-checks the sets of an evaluation.
pub fn evaluation_sets(
    view: &View,
    set: SetId,
    truth: SetId,
    exclude_reviewed_of: Option<SetId>,
) -> ServiceResult<(SetRecord, SetRecord)> {
    let det = load_set(view, set)?;
    let gt = load_set(view, truth)?;
    if det.set.raster_id != gt.set.raster_id {
        return Err(ServiceError::invalid("sets cover different rasters"));
    }
    if let Some(x) = exclude_reviewed_of {
        if load_set(view, x)?.set.raster_id != det.set.raster_id {
            return Err(ServiceError::invalid("exclude_reviewed_of covers a different raster"));
        }
    }
    Ok((det, gt))
}

pub fn read_raster(store: &Store, rec: &RasterRecord) -> ServiceResult<Raster> {
    let bytes = store
        .get_blob(&blob_raster(rec.meta.id))?
        .ok_or_else(|| ServiceError::Internal(format!("pixels of raster {} are missing", rec.meta.id)))?;
    Raster::new(rec.meta.clone(), bytes).map_err(|e| ServiceError::Internal(e.to_string()))
}

/// Selected, active features of one side of an evaluation.
pub fn evaluation_inputs(
    view: &View,
    set: SetId,
    truth: SetId,
    exclude_reviewed_of: Option<SetId>,
) -> ServiceResult<(TileGrid, Vec<Feature>, Vec<Feature>, TileFilter)> {
    let (det, _) = evaluation_sets(view, set, truth, exclude_reviewed_of)?;
    let filter = match exclude_reviewed_of {
        Some(x) => TileFilter::Except(load_set(view, x)?.set.reviewed),
        None => TileFilter::All,
    };
    Ok((det.set.grid, set_features(view, set)?, set_features(view, truth)?, filter))
}

/// Applies `filter` and the active-state rule, yielding worker inputs.
pub fn select_features(grid: &TileGrid, features: &[Feature], filter: &TileFilter) -> Vec<FeatureData> {
    features
        .iter()
        .filter(|f| f.state.is_active())
        .filter(|f| {
            let [cx, cy] = f.geometry.centroid();
            let t = grid.tile_at(cx, cy);
            match filter {
                TileFilter::All => true,
                TileFilter::Only(s) => s.contains(&t),
                TileFilter::Except(s) => !s.contains(&t),
            }
        })
        .map(|f| FeatureData {
            id: f.id,
            geometry: f.geometry.clone(),
        })
        .collect()
}

/// Builds the worker-facing assignment for the job's current attempt.
pub fn materialize(store: &Store, job: &Job, resampling: Resampling) -> ServiceResult<AssignedJob> {
    let parsed = JobPayload::parse(job.kind, &job.payload).map_err(|e| ServiceError::Invalid(e.to_string()))?;
    let inputs = match parsed {
        JobPayload::TilePyramid(p) => {
            let rec = store.read(|v| load_raster(v, p.raster_id))?;
            let raster = read_raster(store, &rec)?;
            let zooms = pyramid_zooms(&rec.meta);
            JobInputs::TilePyramid {
                raster: RasterData::from_raster(&raster),
                min_zoom: p.min_zoom.unwrap_or(*zooms.start()),
                max_zoom: p.max_zoom.unwrap_or(*zooms.end()),
                resampling,
            }
        }
        JobPayload::Infer(p) => {
            let (rec, model) = store.read(|v| Ok::<_, ServiceError>((load_raster(v, p.raster_id)?, load_model(v, p.model_id)?)))?;
            let raster = read_raster(store, &rec)?;
            JobInputs::Infer {
                raster: RasterData::from_raster(&raster),
                task: model.task,
                params: model.params,
                tile_size: ANALYSIS_TILE,
            }
        }
        JobPayload::Adapt(p) => {
            let (rec, parent, set, features) = store.read(|v| {
                let set = load_set(v, p.set_id)?;
                Ok::<_, ServiceError>((
                    load_raster(v, set.set.raster_id)?,
                    load_model(v, p.parent_model_id)?,
                    set.set.clone(),
                    set_features(v, p.set_id)?,
                ))
            })?;
            let image = read_raster(store, &rec)?.to_gray8();
            let truth = training_truth(&set, &features);
            let tiles: Vec<TileData> = truth
                .into_iter()
                .map(|(index, polys)| {
                    let w = set.grid.window(index);
                    let t = extract_tile(&image, w, set.grid.tile_size);
                    TileData {
                        index,
                        width: t.width,
                        height: t.height,
                        valid_w: w.w,
                        valid_h: w.h,
                        pixels: b64_encode(&t.data),
                        truth: polys,
                    }
                })
                .collect();
            if tiles.is_empty() {
                return Err(ServiceError::invalid(format!("set {} has no reviewed tiles", p.set_id)));
            }
            record_corrected_tiles(store, job, tiles.iter().map(|t| t.index).collect())?;
            JobInputs::Adapt {
                parent_params: parent.params,
                space: SearchSpace::default(),
                tiles,
            }
        }
        JobPayload::Evaluate(p) => {
            let (grid, det, truth, filter) =
                store.read(|v| evaluation_inputs(v, p.set_id, p.truth_set_id, p.exclude_reviewed_of))?;
            JobInputs::Evaluate {
                mode: p.mode,
                iou_threshold: p.iou_threshold.unwrap_or(DEFAULT_IOU_THRESHOLD),
                detections: select_features(&grid, &det, &filter),
                truth: select_features(&grid, &truth, &filter),
                grid,
            }
        }
    };
    Ok(AssignedJob {
        id: job.id,
        kind: job.kind,
        attempt: job.current_attempt(),
        payload: job.payload.clone(),
        inputs,
    })
}

/// Remembers which tiles an adapt attempt trains on, so the adaptation
/// record names exactly those even if more tiles are reviewed meanwhile.
fn record_corrected_tiles(
    store: &Store,
    job: &Job,
    tiles: Vec<geoloop_core::geo::TileIndex>,
) -> ServiceResult<()> {
    store.atomically(|v| {
        let current: Job = load(v, JOBS, &id_key(job.id.0))?.ok_or_else(|| ServiceError::not_found("job", job.id))?;
        let Some(worker) = job.assigned_worker.as_deref() else {
            return Ok::<_, ServiceError>((Vec::new(), ()));
        };
        if !current.is_bound_to(worker, job.current_attempt()) {
            return Ok((Vec::new(), ()));
        }
        let mut ctx: JobContext = load(v, JOB_CONTEXT, &id_key(job.id.0))?.unwrap_or_default();
        ctx.corrected_tiles = tiles;
        Ok((vec![Mutation::put(JOB_CONTEXT, id_key(job.id.0), encode(&ctx))], ()))
    })?;
    Ok(())
}

/// A decoded worker result whose blobs, if any, are already stored.
#[derive(Debug)]
pub enum Prepared {
    Pyramid { min_zoom: u8, max_zoom: u8, tiles: usize },
    Infer(InferResult),
    Adapt(AdaptOutcome),
    Evaluate(MetricsReport),
}

fn parse<T: serde::de::DeserializeOwned>(payload: Value) -> ServiceResult<T> {
    serde_json::from_value(payload).map_err(|e| ServiceError::invalid(format!("malformed result: {e}")))
}

/// Decodes a result and writes its blobs. Runs outside the ingest
/// transaction; blobs of a result that is later discarded are overwritten
/// by the accepted attempt.
pub fn prepare(store: &Store, job: &Job, payload: Value) -> ServiceResult<Prepared> {
    let parsed = JobPayload::parse(job.kind, &job.payload).map_err(|e| ServiceError::Invalid(e.to_string()))?;
    Ok(match parsed {
        JobPayload::TilePyramid(p) => {
            let r: PyramidResult = parse(payload)?;
            if r.min_zoom > r.max_zoom {
                return Err(ServiceError::invalid("min_zoom exceeds max_zoom"));
            }
            for t in &r.tiles {
                if t.z < r.min_zoom || t.z > r.max_zoom {
                    return Err(ServiceError::invalid(format!("tile {}/{}/{} outside the zoom range", t.z, t.x, t.y)));
                }
                let png = b64_decode(&t.png).map_err(ServiceError::Invalid)?;
                store.put_blob(&blob_tile(p.raster_id, t.z, t.x, t.y), &png)?;
            }
            Prepared::Pyramid {
                min_zoom: r.min_zoom,
                max_zoom: r.max_zoom,
                tiles: r.tiles.len(),
            }
        }
        JobPayload::Infer(_) => Prepared::Infer(parse(payload)?),
        JobPayload::Adapt(_) => Prepared::Adapt(parse(payload)?),
        JobPayload::Evaluate(_) => Prepared::Evaluate(parse(payload)?),
    })
}

/// Feature records and their announcements.
pub fn feature_write(f: &Feature, rev: &geoloop_core::annotations::Revision, project: ProjectId, create: bool) -> Vec<Mutation> {
    let key = records::feature_key(f.set_id, f.id);
    let value = encode(f);
    let put = if create {
        Mutation::create(FEATURES, &key, value)
    } else {
        Mutation::put(FEATURES, &key, value)
    }
    .with_ref(SETS, id_key(f.set_id.0));
    vec![
        put,
        Mutation::create(REVISIONS, records::revision_key(f.id, rev.version), encode(rev)),
        Mutation::append(&project_topic(project), event("feature.updated", encode(f))),
    ]
}

pub fn set_write(rec: &SetRecord, create: bool) -> Mutation {
    let value = encode(rec);
    let key = id_key(rec.set.id.0);
    let m = if create {
        Mutation::create(SETS, &key, value)
    } else {
        Mutation::put(SETS, &key, value)
    };
    let mut m = m.with_ref(RASTERS, id_key(rec.set.raster_id.0));
    if let Some(model) = rec.set.model_id {
        m = m.with_ref(MODELS, id_key(model.0));
    }
    m
}

/// Builds proposed features for an inference result, merging detections
/// split across tile borders before anything is stored.
pub fn proposed_features(
    set: &DetectionSet,
    result: &InferResult,
    editor: &str,
    mut next_id: impl FnMut() -> FeatureId,
) -> (Vec<Feature>, Vec<geoloop_core::annotations::Revision>, usize) {
    let now = Utc::now();
    let mut draft: Vec<Feature> = Vec::new();
    for t in &result.tiles {
        for p in &t.polygons {
            let o = new_feature(next_id(), set, t.index, p.clone(), Source::Model, FeatureState::Proposed, editor, None, now);
            draft.push(o.feature);
        }
    }
    let groups = plan_border_merge(&draft);
    let mut absorbed = BTreeSet::new();
    let mut merged_geometry = BTreeMap::new();
    for g in &groups {
        absorbed.extend(g.absorbed.iter().copied());
        merged_geometry.insert(g.keep, g.geometry.clone());
    }
    let mut features = Vec::new();
    let mut revisions = Vec::new();
    for f in draft {
        if absorbed.contains(&f.id) {
            continue;
        }
        let (tile, geometry) = match merged_geometry.remove(&f.id) {
            Some(g) => (set.tile_of(&g), g),
            None => (f.tile, f.geometry),
        };
        let o = new_feature(f.id, set, tile, geometry, Source::Model, FeatureState::Proposed, editor, None, now);
        features.push(o.feature);
        revisions.push(o.revision);
    }
    (features, revisions, absorbed.len())
}

/// Turns an accepted result into records. Returns the job's result summary
/// and the mutations to commit alongside the job's success.
pub fn ingest(
    view: &View,
    ids: &mut IdAlloc,
    job: &Job,
    ctx: &JobContext,
    prepared: Prepared,
) -> ServiceResult<(Value, Vec<Mutation>)> {
    let parsed = JobPayload::parse(job.kind, &job.payload).map_err(|e| ServiceError::Invalid(e.to_string()))?;
    match (parsed, prepared) {
        (JobPayload::TilePyramid(p), Prepared::Pyramid { min_zoom, max_zoom, tiles }) => {
            let mut rec = load_raster(view, p.raster_id)?;
            rec.pyramid = PyramidState::Ready {
                job_id: job.id,
                min_zoom,
                max_zoom,
            };
            let summary = json!({ "raster_id": p.raster_id, "min_zoom": min_zoom, "max_zoom": max_zoom, "tiles": tiles });
            let ops = vec![
                Mutation::put(RASTERS, id_key(p.raster_id.0), encode(&rec)),
                Mutation::append(&project_topic(rec.project_id), event("raster.ready", raster_view(&rec))),
            ];
            Ok((summary, ops))
        }
        (JobPayload::Infer(p), Prepared::Infer(result)) => {
            let raster = load_raster(view, p.raster_id)?;
            let model = load_model(view, p.model_id)?;
            let grid = TileGrid::new(raster.meta.width, raster.meta.height, ANALYSIS_TILE);
            if result.tiles.iter().any(|t| !grid.contains(t.index)) {
                return Err(ServiceError::invalid("result names a tile outside the raster"));
            }
            let set_id = SetId(ids.alloc(view, "set"));
            let set = DetectionSet {
                id: set_id,
                raster_id: p.raster_id,
                kind: SetKind::Detections,
                model_id: Some(p.model_id),
                created_by_job: Some(job.id),
                grid,
                reviewed: BTreeSet::new(),
                created_at: Utc::now(),
            };
            let editor = format!("model:{}", model.id);
            let (features, revisions, merged) =
                proposed_features(&set, &result, &editor, || FeatureId(ids.alloc(view, "feature")));
            let rec = SetRecord {
                set,
                project_id: raster.project_id,
                name: Some(format!("{} on raster {}", model.name, p.raster_id)),
                water_pixels: result.water_pixels,
            };
            let mut ops = vec![
                set_write(&rec, true),
                Mutation::append(&project_topic(rec.project_id), event("set.created", set_view(&rec, features.len()))),
            ];
            for (f, r) in features.iter().zip(&revisions) {
                ops.extend(feature_write(f, r, rec.project_id, true));
            }
            let summary = json!({
                "set_id": set_id,
                "features": features.len(),
                "merged": merged,
                "water_pixels": result.water_pixels,
            });
            Ok((summary, ops))
        }
        (JobPayload::Adapt(p), Prepared::Adapt(outcome)) => {
            let parent = load_model(view, p.parent_model_id)?;
            let set = load_set(view, p.set_id)?;
            let model_id = ModelId(ids.alloc(view, "model"));
            let adaptation_id = AdaptationId(ids.alloc(view, "adaptation"));
            let corrected = if ctx.corrected_tiles.is_empty() {
                set.set.reviewed.iter().copied().collect()
            } else {
                ctx.corrected_tiles.clone()
            };
            let node = ModelNode {
                id: model_id,
                name: p.name.clone().unwrap_or_else(|| format!("{}-adapted-{}", parent.name, model_id)),
                task: parent.task,
                parent_id: Some(parent.id),
                params: outcome.selected.clone(),
                created_from: Some(adaptation_id),
                created_at: Utc::now(),
                deleted: false,
            };
            let record = AdaptationRecord {
                id: adaptation_id,
                parent_model_id: parent.id,
                raster_id: set.set.raster_id,
                set_id: set.set.id,
                corrected_tile_ids: corrected,
                search_log: outcome.search_log,
                selected_params: outcome.selected,
                before_metrics: outcome.before.clone(),
                after_metrics: outcome.after.clone(),
            };
            let mut ops = model_write(&node);
            ops.push(
                Mutation::create(ADAPTATIONS, id_key(adaptation_id.0), encode(&record))
                    .with_ref(MODELS, id_key(parent.id.0))
                    .with_ref(RASTERS, id_key(set.set.raster_id.0))
                    .with_ref(SETS, id_key(set.set.id.0)),
            );
            let summary = json!({
                "model_id": model_id,
                "adaptation_id": adaptation_id,
                "selected_params": record.selected_params,
                "before_metrics": outcome.before,
                "after_metrics": outcome.after,
                "candidates": record.search_log.len(),
            });
            Ok((summary, ops))
        }
        (JobPayload::Evaluate(p), Prepared::Evaluate(report)) => {
            load_set(view, p.set_id)?;
            Ok((encode(&report), Vec::new()))
        }
        _ => Err(ServiceError::invalid("result does not match the job kind")),
    }
}

pub fn model_write(node: &ModelNode) -> Vec<Mutation> {
    let mut put = Mutation::create(MODELS, id_key(node.id.0), encode(node));
    if let Some(p) = node.parent_id {
        put = put.with_ref(MODELS, id_key(p.0));
    }
    vec![
        put,
        Mutation::append(records::MODELS_TOPIC, event("model.created", encode(node))),
    ]
}

pub fn raster_view(rec: &RasterRecord) -> Value {
    let mut v = encode(&rec.meta);
    if let Value::Object(m) = &mut v {
        m.insert("project_id".into(), json!(rec.project_id));
        m.insert("name".into(), json!(rec.name));
        m.insert("created_at".into(), json!(rec.created_at));
        m.insert("pyramid".into(), encode(&rec.pyramid));
    }
    v
}

pub fn set_view(rec: &SetRecord, feature_count: usize) -> Value {
    let mut v = encode(rec);
    if let Value::Object(m) = &mut v {
        m.insert("reviewed_fraction".into(), json!(rec.set.reviewed_fraction()));
        m.insert("tile_count".into(), json!(rec.set.grid.len()));
        m.insert("feature_count".into(), json!(feature_count));
    }
    v
}

/// Marks a raster's pyramid failed when its tiling job gives up.
pub fn on_job_failed(view: &View, job: &Job) -> ServiceResult<Vec<Mutation>> {
    let Ok(JobPayload::TilePyramid(p)) = JobPayload::parse(job.kind, &job.payload) else {
        return Ok(Vec::new());
    };
    let Some(mut rec) = load::<RasterRecord>(view, RASTERS, &id_key(p.raster_id.0))? else {
        return Ok(Vec::new());
    };
    if !matches!(rec.pyramid, PyramidState::Pending { job_id } if job_id == job.id) {
        return Ok(Vec::new());
    }
    rec.pyramid = PyramidState::Failed {
        job_id: job.id,
        error: job.error.clone().unwrap_or_default(),
    };
    Ok(vec![Mutation::put(RASTERS, id_key(p.raster_id.0), encode(&rec))])
}
