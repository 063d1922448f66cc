//! Worker wire protocol: newline-delimited JSON messages carried in
//! WebSocket text frames. A frame may hold several messages, one per line.

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adapt::SearchSpace;
use crate::detect::DetectorParams;
use crate::geo::{Gray8, Raster, RasterMeta, Resampling, TileGrid, TileIndex};
use crate::geometry::Polygon;
use crate::ids::{FeatureId, JobId};
use crate::jobs::JobKind;
use crate::metrics::EvalMode;
use crate::registry::Task;

/// Worker to server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WorkerMessage {
    Register {
        worker_id: String,
        capabilities: Vec<JobKind>,
    },
    Heartbeat {},
    Progress {
        job_id: JobId,
        fraction: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        attempt: Option<u32>,
    },
    Result {
        job_id: JobId,
        attempt: u32,
        payload: Value,
    },
    Error {
        job_id: JobId,
        attempt: u32,
        message: String,
    },
}

/// Server to worker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Registered {
        worker_id: String,
        heartbeat_interval_ms: u64,
    },
    Assign {
        job: Box<AssignedJob>,
    },
    Cancel {
        job_id: JobId,
    },
    Error {
        message: String,
    },
}

/// A job as handed to a worker: identity, the attempt it must echo back, the
/// original payload, and every input it needs materialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignedJob {
    pub id: JobId,
    pub kind: JobKind,
    pub attempt: u32,
    pub payload: Value,
    pub inputs: JobInputs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum JobInputs {
    TilePyramid {
        raster: RasterData,
        min_zoom: u8,
        max_zoom: u8,
        #[serde(default)]
        resampling: Resampling,
    },
    Infer {
        raster: RasterData,
        task: Task,
        params: DetectorParams,
        tile_size: u32,
    },
    Adapt {
        parent_params: DetectorParams,
        space: SearchSpace,
        tiles: Vec<TileData>,
    },
    Evaluate {
        grid: TileGrid,
        mode: EvalMode,
        iou_threshold: f64,
        detections: Vec<FeatureData>,
        truth: Vec<FeatureData>,
    },
}

/// Raster metadata with the pixel buffer in standard base64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterData {
    pub meta: RasterMeta,
    pub pixels: String,
}

impl RasterData {
    pub fn from_raster(r: &Raster) -> Self {
        Self {
            meta: r.meta.clone(),
            pixels: b64_encode(r.pixels()),
        }
    }

    pub fn to_raster(&self) -> Result<Raster, String> {
        let bytes = b64_decode(&self.pixels)?;
        Raster::new(self.meta.clone(), bytes).map_err(|e| e.to_string())
    }
}

/// A corrected training tile: padded 8-bit pixels plus ground truth in tile
/// pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileData {
    pub index: TileIndex,
    pub width: u32,
    pub height: u32,
    pub valid_w: u32,
    pub valid_h: u32,
    pub pixels: String,
    pub truth: Vec<Polygon>,
}

impl TileData {
    pub fn image(&self) -> Result<Gray8, String> {
        Gray8::from_vec(self.width, self.height, b64_decode(&self.pixels)?)
            .ok_or_else(|| "tile pixel count does not match its size".to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureData {
    pub id: FeatureId,
    pub geometry: Polygon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedTile {
    pub z: u8,
    pub x: u32,
    pub y: u32,
    pub png: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PyramidResult {
    pub min_zoom: u8,
    pub max_zoom: u8,
    /// Tiles intersecting the raster footprint; other tiles are transparent.
    pub tiles: Vec<RenderedTile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileDetections {
    pub index: TileIndex,
    /// Raster pixel coordinates.
    pub polygons: Vec<Polygon>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferResult {
    /// Row-major tile order regardless of execution order.
    pub tiles: Vec<TileDetections>,
    /// Water pixel count for flood models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub water_pixels: Option<u64>,
}

pub fn b64_encode(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

pub fn b64_decode(s: &str) -> Result<Vec<u8>, String> {
    base64::engine::general_purpose::STANDARD
        .decode(s)
        .map_err(|e| format!("bad base64: {e}"))
}

/// Encodes messages as NDJSON, one per line, newline-terminated.
pub fn encode_ndjson<T: Serialize>(messages: &[T]) -> String {
    let mut out = String::new();
    for m in messages {
        out.push_str(&serde_json::to_string(m).expect("protocol messages serialize"));
        out.push('\n');
    }
    out
}

/// Decodes every non-blank line of a frame.
pub fn decode_ndjson<T: for<'de> Deserialize<'de>>(frame: &str) -> Result<Vec<T>, serde_json::Error> {
    frame
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}
