//! Georeferencing, raster ingestion, the XYZ display pyramid and the
//! analysis-tile grid.

mod crs;
mod partition;
mod raster;
mod render;
mod tiles;
mod transform;

use thiserror::Error;

pub use crs::{lonlat_to_mercator, mercator_to_lonlat, Crs, EARTH_RADIUS};
pub use partition::{
    extract_tile, partition_analysis_tiles, tile_for_point, AnalysisTile, PixelWindow,
    TileGrid, TileIndex, TileStatus, ANALYSIS_TILE_SIZE,
};
pub use raster::{Gray8, Raster, RasterMeta, Sidecar};
pub use render::{
    encode_rgba_png, native_zoom, pyramid_zooms, render_display_tile, tiles_covering, Resampling,
    DISPLAY_TILE_SIZE,
};
pub use tiles::{lonlat_to_tile, tile_bounds_mercator, TileAddress, MAX_LATITUDE, MAX_ZOOM};
pub use transform::GeoTransform;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("geotransform is singular (determinant {0})")]
    SingularTransform(f64),
    #[error("latitude {0} outside the Web Mercator range")]
    LatitudeOutOfRange(f64),
    #[error("longitude {0} outside [-180, 180)")]
    LongitudeOutOfRange(f64),
    #[error("zoom {0} exceeds the supported maximum")]
    ZoomOutOfRange(u8),
    #[error("tile {x}/{y} is outside the grid at zoom {z}")]
    InvalidTile { z: u8, x: u32, y: u32 },
    #[error("unsupported CRS EPSG:{0} (only 4326 and 3857)")]
    UnsupportedCrs(u32),
    #[error("invalid sidecar: {0}")]
    InvalidSidecar(String),
    #[error("unsupported image: {0}")]
    UnsupportedImage(String),
    #[error("pixel buffer holds {actual} bytes, expected {expected}")]
    BufferSize { expected: usize, actual: usize },
    #[error("png decode failed: {0}")]
    Decode(String),
}
