//! Job execution shared by the in-process worker and the standalone worker
//! binary. Pure computation over the materialized inputs of an assignment.

use rayon::prelude::*;
use serde_json::Value;

use crate::adapt::{adapt, TrainingTile};
use crate::detect::{detect_window, DetectError};
use crate::flood::flood_map;
use crate::geo::{extract_tile, render_display_tile, tiles_covering, TileGrid};
use crate::geometry::Polygon;
use crate::mask::BinaryMask;
use crate::metrics::{match_detections, pixel_report, MetricsReport};
use crate::protocol::{
    b64_encode, AssignedJob, FeatureData, InferResult, JobInputs, PyramidResult, RenderedTile, TileDetections,
};
use crate::registry::Task;

/// Runs an assignment to completion. `progress` receives fractions in
/// `[0, 1]`, non-decreasing.
pub fn execute(job: &AssignedJob, progress: &mut dyn FnMut(f64)) -> Result<Value, String> {
    let value = match &job.inputs {
        JobInputs::TilePyramid {
            raster,
            min_zoom,
            max_zoom,
            resampling,
        } => {
            let raster = raster.to_raster()?;
            let mut tiles = Vec::new();
            let levels = f64::from(max_zoom.saturating_sub(*min_zoom)) + 1.0;
            for (i, z) in (*min_zoom..=*max_zoom).enumerate() {
                let addrs = tiles_covering(&raster.meta, z);
                let rendered: Result<Vec<RenderedTile>, String> = addrs
                    .par_iter()
                    .map(|&a| {
                        let png = render_display_tile(&raster, a, *resampling).map_err(|e| e.to_string())?;
                        Ok(RenderedTile {
                            z: a.z,
                            x: a.x,
                            y: a.y,
                            png: b64_encode(&png),
                        })
                    })
                    .collect();
                tiles.extend(rendered?);
                progress((i as f64 + 1.0) / levels);
            }
            serde_json::to_value(PyramidResult {
                min_zoom: *min_zoom,
                max_zoom: *max_zoom,
                tiles,
            })
        }
        JobInputs::Infer {
            raster,
            task,
            params,
            tile_size,
        } => {
            let raster = raster.to_raster()?;
            let grid = TileGrid::new(raster.width(), raster.height(), *tile_size);
            let result = match task {
                Task::Structures => infer_structures(&raster.to_gray8(), &grid, params, progress),
                Task::Flood => {
                    let map = flood_map(&raster, params).map_err(|e| e.to_string())?;
                    progress(1.0);
                    let mut tiles: Vec<TileDetections> = grid
                        .indices()
                        .map(|index| TileDetections {
                            index,
                            polygons: Vec::new(),
                        })
                        .collect();
                    for p in map.polygons {
                        let [cx, cy] = p.centroid();
                        let t = grid.tile_at(cx, cy);
                        tiles[(t.row * grid.cols + t.col) as usize].polygons.push(p);
                    }
                    Ok(InferResult {
                        tiles,
                        water_pixels: Some(map.mask.count() as u64),
                    })
                }
            }
            .map_err(|e| e.to_string())?;
            serde_json::to_value(result)
        }
        JobInputs::Adapt {
            parent_params,
            space,
            tiles,
        } => {
            let training = tiles
                .iter()
                .map(|t| {
                    Ok(TrainingTile {
                        image: t.image()?,
                        valid_w: t.valid_w,
                        valid_h: t.valid_h,
                        truth: t.truth.clone(),
                    })
                })
                .collect::<Result<Vec<_>, String>>()?;
            progress(0.05);
            let outcome = adapt(parent_params, &training, space).map_err(|e| e.to_string())?;
            progress(1.0);
            serde_json::to_value(outcome)
        }
        JobInputs::Evaluate {
            grid,
            mode,
            iou_threshold,
            detections,
            truth,
        } => {
            let report = evaluate(grid, *mode, *iou_threshold, detections, truth)?;
            progress(1.0);
            serde_json::to_value(report)
        }
    };
    value.map_err(|e| e.to_string())
}

fn infer_structures(
    image: &crate::geo::Gray8,
    grid: &TileGrid,
    params: &crate::detect::DetectorParams,
    progress: &mut dyn FnMut(f64),
) -> Result<InferResult, DetectError> {
    params.validate()?;
    let mut tiles = Vec::with_capacity(grid.len());
    for row in 0..grid.rows {
        let row_tiles: Result<Vec<TileDetections>, DetectError> = (0..grid.cols)
            .into_par_iter()
            .map(|col| {
                let index = crate::geo::TileIndex::new(col, row);
                let w = grid.window(index);
                let tile = extract_tile(image, w, grid.tile_size);
                let polygons = detect_window(&tile, w.w, w.h, params)?
                    .into_iter()
                    .map(|p| p.translate(f64::from(w.x0), f64::from(w.y0)))
                    .collect();
                Ok(TileDetections { index, polygons })
            })
            .collect();
        tiles.extend(row_tiles?);
        progress(f64::from(row + 1) / f64::from(grid.rows.max(1)));
    }
    Ok(InferResult {
        tiles,
        water_pixels: None,
    })
}

/// Metrics over already-selected features.
pub fn evaluate(
    grid: &TileGrid,
    mode: crate::metrics::EvalMode,
    iou_threshold: f64,
    detections: &[FeatureData],
    truth: &[FeatureData],
) -> Result<MetricsReport, String> {
    match mode {
        crate::metrics::EvalMode::Objects => {
            let d: Vec<_> = detections.iter().map(|f| (f.id, &f.geometry)).collect();
            let g: Vec<_> = truth.iter().map(|f| (f.id, &f.geometry)).collect();
            Ok(MetricsReport::from_counts(match_detections(&g, &d, iou_threshold).counts()))
        }
        crate::metrics::EvalMode::Pixels => {
            let raster = |fs: &[FeatureData]| {
                let mut m = BinaryMask::new(grid.width, grid.height);
                for f in fs {
                    f.geometry.rasterize_into(&mut m);
                }
                m
            };
            pixel_report(&raster(truth), &raster(detections)).map_err(|e| e.to_string())
        }
    }
}

/// Pixel-space polygons of an inference result, flattened in tile order.
pub fn flatten_detections(result: &InferResult) -> Vec<(crate::geo::TileIndex, &Polygon)> {
    result
        .tiles
        .iter()
        .flat_map(|t| t.polygons.iter().map(move |p| (t.index, p)))
        .collect()
}
