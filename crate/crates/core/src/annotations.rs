//! Detection sets, features, analyst corrections, border merging and
//! GeoJSON interchange.
//!
//! Feature geometry is kept in raster pixel coordinates, the space the
//! detector and the tile grid live in; GeoJSON conversion goes through the
//! raster's geotransform and CRS.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::geo::{RasterMeta, TileGrid, TileIndex};
use crate::geometry::{GeometryError, Point, Polygon};
use crate::ids::{FeatureId, JobId, ModelId, RasterId, SetId};
use crate::mask::BinaryMask;
use crate::metrics::{match_detections, pixel_report, MetricsReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Model,
    Analyst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureState {
    Proposed,
    Accepted,
    Rejected,
    Added,
}

impl FeatureState {
    pub const ALL: [FeatureState; 4] = [
        FeatureState::Proposed,
        FeatureState::Accepted,
        FeatureState::Rejected,
        FeatureState::Added,
    ];

    /// Counted by evaluation (everything except rejected).
    pub fn is_active(self) -> bool {
        self != FeatureState::Rejected
    }

    /// Validated by an analyst.
    pub fn is_validated(self) -> bool {
        matches!(self, FeatureState::Accepted | FeatureState::Added)
    }
}

impl std::str::FromStr for FeatureState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(Value::String(s.to_string())).map_err(|_| format!("unknown state {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    pub id: FeatureId,
    pub set_id: SetId,
    pub tile: TileIndex,
    /// Pixel coordinates.
    pub geometry: Polygon,
    pub source: Source,
    pub state: FeatureState,
    pub version: u64,
    pub last_editor: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// Timestamp of the write whose geometry/state is current.
    pub content_ts: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionAction {
    Accept,
    Reject,
    Add,
    Modify,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correction {
    #[serde(default)]
    pub feature_id: Option<FeatureId>,
    #[serde(default)]
    pub tile_index: Option<TileIndex>,
    pub action: CorrectionAction,
    #[serde(default)]
    pub new_geometry: Option<Polygon>,
    pub user: String,
    #[serde(default = "Utc::now")]
    pub timestamp: DateTime<Utc>,
    #[serde(default)]
    pub basis_version: Option<u64>,
    #[serde(default)]
    pub label: Option<String>,
}

/// One entry of a feature's history. Version `k` of a feature has exactly
/// `k` revisions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Revision {
    pub feature_id: FeatureId,
    pub version: u64,
    /// `None` for the creating write.
    pub action: Option<CorrectionAction>,
    pub editor: String,
    pub timestamp: DateTime<Utc>,
    pub basis_version: Option<u64>,
    /// Geometry and state carried by this write.
    pub geometry: Polygon,
    pub state: FeatureState,
    /// A stale write that lost last-writer-wins; its content is kept here
    /// only.
    pub superseded: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewStatus {
    Unreviewed,
    Reviewed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetKind {
    /// Output of an inference job.
    Detections,
    /// Analyst-supplied reference features.
    Truth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub id: SetId,
    pub raster_id: RasterId,
    pub kind: SetKind,
    pub model_id: Option<ModelId>,
    pub created_by_job: Option<JobId>,
    pub grid: TileGrid,
    pub reviewed: BTreeSet<TileIndex>,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileReviewEntry {
    pub index: TileIndex,
    pub status: ReviewStatus,
}

impl DetectionSet {
    pub fn tile_status(&self, index: TileIndex) -> Option<ReviewStatus> {
        self.grid.contains(index).then(|| {
            if self.reviewed.contains(&index) {
                ReviewStatus::Reviewed
            } else {
                ReviewStatus::Unreviewed
            }
        })
    }

    /// Status of every tile, row-major.
    pub fn tile_statuses(&self) -> Vec<TileReviewEntry> {
        self.grid
            .indices()
            .map(|index| TileReviewEntry {
                index,
                status: self.tile_status(index).unwrap(),
            })
            .collect()
    }

    pub fn reviewed_fraction(&self) -> f64 {
        if self.grid.is_empty() {
            0.0
        } else {
            self.reviewed.len() as f64 / self.grid.len() as f64
        }
    }

    /// Marks a tile reviewed. Returns whether the status changed.
    pub fn mark_reviewed(&mut self, index: TileIndex) -> Result<bool, AnnotationError> {
        if !self.grid.contains(index) {
            return Err(AnnotationError::UnknownTile(index));
        }
        Ok(self.reviewed.insert(index))
    }

    /// Tile containing the centroid of `geometry`.
    pub fn tile_of(&self, geometry: &Polygon) -> TileIndex {
        let [cx, cy] = geometry.centroid();
        self.grid.tile_at(cx, cy)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnnotationError {
    #[error("unknown feature {0}")]
    UnknownFeature(FeatureId),
    #[error("unknown tile {0:?}")]
    UnknownTile(TileIndex),
    #[error("invalid geometry: {0}")]
    InvalidGeometry(#[from] GeometryError),
    #[error("invalid correction: {0}")]
    InvalidCorrection(String),
    #[error("feature {0} belongs to another set")]
    WrongSet(FeatureId),
    #[error("invalid GeoJSON: {0}")]
    InvalidGeoJson(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionOutcome {
    pub feature: Feature,
    pub revision: Revision,
}

/// Creates a feature at version 1 together with its first revision.
#[allow(clippy::too_many_arguments)]
pub fn new_feature(
    id: FeatureId,
    set: &DetectionSet,
    tile: TileIndex,
    geometry: Polygon,
    source: Source,
    state: FeatureState,
    editor: &str,
    label: Option<String>,
    ts: DateTime<Utc>,
) -> CorrectionOutcome {
    let feature = Feature {
        id,
        set_id: set.id,
        tile,
        geometry,
        source,
        state,
        version: 1,
        last_editor: editor.to_string(),
        label,
        content_ts: ts,
    };
    let revision = Revision {
        feature_id: id,
        version: 1,
        action: None,
        editor: editor.to_string(),
        timestamp: ts,
        basis_version: None,
        geometry: feature.geometry.clone(),
        state,
        superseded: false,
    };
    CorrectionOutcome { feature, revision }
}

/// Checks the shape of a correction before any lookup.
pub fn validate_correction(c: &Correction) -> Result<(), AnnotationError> {
    let bad = |m: &str| Err(AnnotationError::InvalidCorrection(m.to_string()));
    match c.action {
        CorrectionAction::Add => {
            if c.feature_id.is_some() {
                return bad("add must not name a feature");
            }
            if c.new_geometry.is_none() {
                return bad("add requires new_geometry");
            }
        }
        CorrectionAction::Modify => {
            if c.feature_id.is_none() || c.new_geometry.is_none() {
                return bad("modify requires feature_id and new_geometry");
            }
        }
        CorrectionAction::Accept | CorrectionAction::Reject => {
            if c.feature_id.is_none() {
                return bad("accept/reject require feature_id");
            }
        }
    }
    if c.user.trim().is_empty() {
        return bad("user must be non-empty");
    }
    if let Some(g) = &c.new_geometry {
        g.validate()?;
    }
    Ok(())
}

/// Applies a correction. `existing` is the target feature for accept,
/// reject and modify; `new_id` is used for add.
///
/// Every applied correction bumps the version and appends a revision. A
/// write whose `basis_version` is older than the current version and whose
/// timestamp is older than the current content is stale: it is recorded in
/// history as superseded and the content stays unchanged.
pub fn apply_correction(
    set: &DetectionSet,
    existing: Option<&Feature>,
    c: &Correction,
    new_id: FeatureId,
) -> Result<CorrectionOutcome, AnnotationError> {
    validate_correction(c)?;
    if let Some(t) = c.tile_index {
        if !set.grid.contains(t) {
            return Err(AnnotationError::UnknownTile(t));
        }
    }
    if c.action == CorrectionAction::Add {
        let geometry = c.new_geometry.clone().unwrap();
        let tile = c.tile_index.unwrap_or_else(|| set.tile_of(&geometry));
        return Ok(new_feature(
            new_id,
            set,
            tile,
            geometry,
            Source::Analyst,
            FeatureState::Added,
            &c.user,
            c.label.clone(),
            c.timestamp,
        ));
    }
    let fid = c.feature_id.unwrap();
    let current = existing.ok_or(AnnotationError::UnknownFeature(fid))?;
    if current.id != fid {
        return Err(AnnotationError::UnknownFeature(fid));
    }
    if current.set_id != set.id {
        return Err(AnnotationError::WrongSet(fid));
    }

    let (state, geometry) = match c.action {
        CorrectionAction::Accept => {
            let s = if current.state == FeatureState::Added {
                FeatureState::Added
            } else {
                FeatureState::Accepted
            };
            (s, current.geometry.clone())
        }
        CorrectionAction::Reject => (FeatureState::Rejected, current.geometry.clone()),
        CorrectionAction::Modify => {
            let s = if current.state == FeatureState::Added {
                FeatureState::Added
            } else {
                FeatureState::Accepted
            };
            (s, c.new_geometry.clone().unwrap())
        }
        CorrectionAction::Add => unreachable!(),
    };

    let stale = c.basis_version.is_some_and(|b| b < current.version);
    let wins = !stale || c.timestamp >= current.content_ts;
    let mut feature = current.clone();
    feature.version += 1;
    feature.last_editor = c.user.clone();
    if wins {
        feature.state = state;
        feature.geometry = geometry.clone();
        feature.content_ts = c.timestamp;
        if c.label.is_some() {
            feature.label = c.label.clone();
        }
    }
    let revision = Revision {
        feature_id: fid,
        version: feature.version,
        action: Some(c.action),
        editor: c.user.clone(),
        timestamp: c.timestamp,
        basis_version: c.basis_version,
        geometry,
        state,
        superseded: !wins,
    };
    Ok(CorrectionOutcome { feature, revision })
}

/// One border merge: `keep` takes the union geometry, `absorbed` features
/// are removed.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeGroup {
    pub keep: FeatureId,
    pub absorbed: Vec<FeatureId>,
    pub geometry: Polygon,
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Groups proposed model features from adjacent tiles whose polygons
/// intersect, transitively, and unions each group. Candidates whose union
/// would not be a single polygon stay separate.
pub fn plan_border_merge(features: &[Feature]) -> Vec<MergeGroup> {
    let mut cands: Vec<&Feature> = features
        .iter()
        .filter(|f| f.source == Source::Model && f.state == FeatureState::Proposed)
        .collect();
    cands.sort_by_key(|f| f.id);
    let boxes: Vec<_> = cands.iter().map(|f| f.geometry.bbox()).collect();
    let mut parent: Vec<usize> = (0..cands.len()).collect();
    for i in 0..cands.len() {
        for j in i + 1..cands.len() {
            if !cands[i].tile.is_adjacent(cands[j].tile) || !boxes[i].overlaps(&boxes[j]) {
                continue;
            }
            if cands[i].geometry.intersects(&cands[j].geometry)
                && cands[i].geometry.union(&cands[j].geometry).is_some()
            {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..cands.len() {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    let mut out = Vec::new();
    for members in groups.into_values().filter(|m| m.len() > 1) {
        let mut acc = cands[members[0]].geometry.clone();
        let mut absorbed = Vec::new();
        let mut pending: Vec<usize> = members[1..].to_vec();
        loop {
            let before = pending.len();
            pending.retain(|&m| match acc.union(&cands[m].geometry) {
                Some(u) if u.validate().is_ok() && acc.intersects(&cands[m].geometry) => {
                    acc = u;
                    absorbed.push(cands[m].id);
                    false
                }
                _ => true,
            });
            if pending.is_empty() || pending.len() == before {
                break;
            }
        }
        if !absorbed.is_empty() {
            absorbed.sort();
            out.push(MergeGroup {
                keep: cands[members[0]].id,
                absorbed,
                geometry: orient_image_cw(acc),
            });
        }
    }
    out
}

/// Orients a pixel-space ring to positive shoelace area (clockwise on screen,
/// the orientation the tracer produces).
pub fn orient_image_cw(p: Polygon) -> Polygon {
    if p.signed_area() < 0.0 {
        p.reversed()
    } else {
        p
    }
}

fn ring_signed_area(ring: &[Point]) -> f64 {
    ring.windows(2).map(|w| w[0][0] * w[1][1] - w[1][0] * w[0][1]).sum::<f64>() / 2.0
}

/// Exterior ring in lon/lat, counter-clockwise as GeoJSON requires.
pub fn ring_to_lonlat(geometry: &Polygon, meta: &RasterMeta) -> Vec<Point> {
    let mut ring: Vec<Point> = geometry
        .ring()
        .iter()
        .map(|&[x, y]| {
            let (lon, lat) = meta.pixel_to_lonlat(x, y);
            [lon, lat]
        })
        .collect();
    if ring_signed_area(&ring) < 0.0 {
        ring.reverse();
    }
    ring
}

pub fn feature_to_geojson(f: &Feature, meta: &RasterMeta, model_id: Option<ModelId>) -> Value {
    json!({
        "type": "Feature",
        "id": f.id,
        "geometry": {
            "type": "Polygon",
            "coordinates": [ring_to_lonlat(&f.geometry, meta)],
        },
        "properties": {
            "source": f.source,
            "state": f.state,
            "model_id": model_id,
            "version": f.version,
            "label": f.label,
            "tile": f.tile,
        },
    })
}

/// Features whose state is in `states`, as a FeatureCollection in EPSG:4326.
pub fn export_geojson(
    features: &[Feature],
    meta: &RasterMeta,
    model_id: Option<ModelId>,
    states: &[FeatureState],
) -> Value {
    let items: Vec<Value> = features
        .iter()
        .filter(|f| states.contains(&f.state))
        .map(|f| feature_to_geojson(f, meta, model_id))
        .collect();
    json!({ "type": "FeatureCollection", "features": items })
}

/// A feature parsed from GeoJSON, geometry back in pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportedFeature {
    pub geometry: Polygon,
    pub source: Source,
    pub state: FeatureState,
    pub label: Option<String>,
    pub tile: Option<TileIndex>,
}

pub fn import_geojson(collection: &Value, meta: &RasterMeta) -> Result<Vec<ImportedFeature>, AnnotationError> {
    let bad = |m: String| AnnotationError::InvalidGeoJson(m);
    if collection.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
        return Err(bad("expected a FeatureCollection".into()));
    }
    let items = collection
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing features array".into()))?;
    let mut out = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let geom = item.get("geometry").ok_or_else(|| bad(format!("feature {i}: no geometry")))?;
        if geom.get("type").and_then(Value::as_str) != Some("Polygon") {
            return Err(bad(format!("feature {i}: only Polygon geometries are supported")));
        }
        let rings: Vec<Vec<[f64; 2]>> = serde_json::from_value(geom.get("coordinates").cloned().unwrap_or(Value::Null))
            .map_err(|e| bad(format!("feature {i}: {e}")))?;
        if rings.len() != 1 {
            return Err(bad(format!("feature {i}: holes are not supported")));
        }
        let mut pixel = Vec::with_capacity(rings[0].len());
        for &[lon, lat] in &rings[0] {
            let (x, y) = meta
                .lonlat_to_pixel(lon, lat)
                .map_err(|e| bad(format!("feature {i}: {e}")))?;
            pixel.push([x, y]);
        }
        let geometry = orient_image_cw(Polygon::new(pixel)?);
        let props = item.get("properties").cloned().unwrap_or(Value::Null);
        let field = |k: &str| props.get(k).cloned().filter(|v| !v.is_null());
        let source = match field("source") {
            Some(v) => serde_json::from_value(v).map_err(|e| bad(format!("feature {i}: {e}")))?,
            None => Source::Analyst,
        };
        let state = match field("state") {
            Some(v) => serde_json::from_value(v).map_err(|e| bad(format!("feature {i}: {e}")))?,
            None => FeatureState::Added,
        };
        let label = field("label").and_then(|v| v.as_str().map(str::to_string));
        let tile = field("tile").and_then(|v| serde_json::from_value(v).ok());
        out.push(ImportedFeature {
            geometry,
            source,
            state,
            label,
            tile,
        });
    }
    Ok(out)
}

/// Adaptation ground truth: accepted and added features clipped to each
/// reviewed tile, in tile-local pixel coordinates.
pub fn training_truth(set: &DetectionSet, features: &[Feature]) -> BTreeMap<TileIndex, Vec<Polygon>> {
    let mut out = BTreeMap::new();
    for &index in &set.reviewed {
        let w = set.grid.window(index);
        let (x0, y0) = (f64::from(w.x0), f64::from(w.y0));
        let pieces: Vec<Polygon> = features
            .iter()
            .filter(|f| f.state.is_validated())
            .flat_map(|f| f.geometry.clip_to_window(w))
            .map(|p| p.translate(-x0, -y0))
            .collect();
        out.insert(index, pieces);
    }
    out
}

/// Which tiles take part in an evaluation. Features are assigned to the tile
/// containing their centroid.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum TileFilter {
    #[default]
    All,
    Only(BTreeSet<TileIndex>),
    Except(BTreeSet<TileIndex>),
}

impl TileFilter {
    fn admits(&self, t: TileIndex) -> bool {
        match self {
            TileFilter::All => true,
            TileFilter::Only(s) => s.contains(&t),
            TileFilter::Except(s) => !s.contains(&t),
        }
    }
}

/// Object-level report of active detections against active truth features.
pub fn evaluate_objects(
    grid: &TileGrid,
    det: &[Feature],
    truth: &[Feature],
    filter: &TileFilter,
    iou_threshold: f64,
) -> MetricsReport {
    let select = |fs: &[Feature]| -> Vec<(FeatureId, Polygon)> {
        fs.iter()
            .filter(|f| f.state.is_active())
            .filter(|f| {
                let [cx, cy] = f.geometry.centroid();
                filter.admits(grid.tile_at(cx, cy))
            })
            .map(|f| (f.id, f.geometry.clone()))
            .collect()
    };
    let d = select(det);
    let g = select(truth);
    let dr: Vec<(FeatureId, &Polygon)> = d.iter().map(|(i, p)| (*i, p)).collect();
    let gr: Vec<(FeatureId, &Polygon)> = g.iter().map(|(i, p)| (*i, p)).collect();
    MetricsReport::from_counts(match_detections(&gr, &dr, iou_threshold).counts())
}

/// Mask of active features, rasterized at pixel centers.
pub fn rasterize_features(width: u32, height: u32, features: &[Feature]) -> BinaryMask {
    let mut mask = BinaryMask::new(width, height);
    for f in features.iter().filter(|f| f.state.is_active()) {
        f.geometry.rasterize_into(&mut mask);
    }
    mask
}

pub fn evaluate_pixels(grid: &TileGrid, det: &[Feature], truth: &[Feature]) -> MetricsReport {
    let g = rasterize_features(grid.width, grid.height, truth);
    let d = rasterize_features(grid.width, grid.height, det);
    pixel_report(&g, &d).expect("masks share the raster shape")
}
