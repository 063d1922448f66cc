use serde::{Deserialize, Serialize};

use super::{Gray8, RasterMeta};
use crate::RasterId;

/// Side length of an analysis tile in pixels.
pub const ANALYSIS_TILE_SIZE: u32 = 300;

/// Position of an analysis tile in the grid, serialized as `[col, row]`.
///
/// Orders row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "(u32, u32)", into = "(u32, u32)")]
pub struct TileIndex {
    pub row: u32,
    pub col: u32,
}

impl TileIndex {
    pub fn new(col: u32, row: u32) -> Self {
        Self { col, row }
    }

    /// True for distinct tiles sharing an edge or a corner.
    pub fn is_adjacent(self, other: TileIndex) -> bool {
        self != other && self.col.abs_diff(other.col) <= 1 && self.row.abs_diff(other.row) <= 1
    }
}

impl From<(u32, u32)> for TileIndex {
    fn from((col, row): (u32, u32)) -> Self {
        Self { col, row }
    }
}

impl From<TileIndex> for (u32, u32) {
    fn from(t: TileIndex) -> Self {
        (t.col, t.row)
    }
}

/// Pixel window `(x0, y0, w, h)` in raster pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelWindow {
    pub x0: u32,
    pub y0: u32,
    pub w: u32,
    pub h: u32,
}

impl PixelWindow {
    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x < self.x0 + self.w && y >= self.y0 && y < self.y0 + self.h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TileStatus {
    Unprocessed,
    Detected,
    Corrected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisTile {
    pub raster_id: RasterId,
    pub index: TileIndex,
    pub window: PixelWindow,
    pub status: TileStatus,
}

/// Non-overlapping grid of analysis tiles over a raster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileGrid {
    pub width: u32,
    pub height: u32,
    pub tile_size: u32,
    pub cols: u32,
    pub rows: u32,
}

impl TileGrid {
    pub fn new(width: u32, height: u32, tile_size: u32) -> Self {
        assert!(tile_size > 0, "tile size must be positive");
        Self {
            width,
            height,
            tile_size,
            cols: width.div_ceil(tile_size),
            rows: height.div_ceil(tile_size),
        }
    }

    pub fn for_raster(meta: &RasterMeta) -> Self {
        Self::new(meta.width, meta.height, ANALYSIS_TILE_SIZE)
    }

    pub fn len(&self) -> usize {
        self.cols as usize * self.rows as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, index: TileIndex) -> bool {
        index.col < self.cols && index.row < self.rows
    }

    pub fn window(&self, index: TileIndex) -> PixelWindow {
        let x0 = index.col * self.tile_size;
        let y0 = index.row * self.tile_size;
        PixelWindow {
            x0,
            y0,
            w: self.tile_size.min(self.width - x0),
            h: self.tile_size.min(self.height - y0),
        }
    }

    /// Tile indices in row-major order.
    pub fn indices(&self) -> impl Iterator<Item = TileIndex> + '_ {
        (0..self.rows).flat_map(move |row| (0..self.cols).map(move |col| TileIndex { col, row }))
    }

    /// Tile containing a (fractional) raster pixel coordinate, clamped to the grid.
    pub fn tile_at(&self, x: f64, y: f64) -> TileIndex {
        let clamp = |v: f64, n: u32| -> u32 {
            // NaN and negatives land in the first tile.
            if v.is_nan() || v <= 0.0 {
                0
            } else {
                ((v / f64::from(self.tile_size)).floor() as u64).min(u64::from(n - 1)) as u32
            }
        };
        TileIndex {
            col: clamp(x, self.cols.max(1)),
            row: clamp(y, self.rows.max(1)),
        }
    }
}

/// `ceil(w/size) * ceil(h/size)` tiles in row-major order, windows disjoint
/// and covering every pixel.
pub fn partition_analysis_tiles(meta: &RasterMeta, tile_size: u32) -> Vec<AnalysisTile> {
    let grid = TileGrid::new(meta.width, meta.height, tile_size);
    grid.indices()
        .map(|index| AnalysisTile {
            raster_id: meta.id,
            index,
            window: grid.window(index),
            status: TileStatus::Unprocessed,
        })
        .collect()
}

pub fn tile_for_point(grid: &TileGrid, x: f64, y: f64) -> TileIndex {
    grid.tile_at(x, y)
}

/// Copies a window out of an image, zero-padded to `size x size`.
pub fn extract_tile(image: &Gray8, window: PixelWindow, size: u32) -> Gray8 {
    let mut tile = Gray8::new(size, size);
    let src_w = image.width as usize;
    for r in 0..window.h.min(size) {
        let src = (window.y0 + r) as usize * src_w + window.x0 as usize;
        let dst = r as usize * size as usize;
        let n = window.w.min(size) as usize;
        tile.data[dst..dst + n].copy_from_slice(&image.data[src..src + n]);
    }
    tile
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{Crs, GeoTransform};

    fn meta(width: u32, height: u32) -> RasterMeta {
        RasterMeta {
            id: RasterId(7),
            width,
            height,
            bands: 1,
            bit_depth: 8,
            crs: Crs::WebMercator,
            geotransform: GeoTransform::north_up(0.0, 0.0, 1.0),
        }
    }

    #[test]
    fn single_full_tile() {
        let tiles = partition_analysis_tiles(&meta(300, 300), 300);
        assert_eq!(tiles.len(), 1);
        assert_eq!(tiles[0].window, PixelWindow { x0: 0, y0: 0, w: 300, h: 300 });
    }

    #[test]
    fn ragged_edges() {
        let tiles = partition_analysis_tiles(&meta(1000, 700), 300);
        assert_eq!(tiles.len(), 12);
        let last_col = tiles.iter().find(|t| t.index == TileIndex::new(3, 0)).unwrap();
        assert_eq!(last_col.window.w, 100);
        let last_row = tiles.iter().find(|t| t.index == TileIndex::new(0, 2)).unwrap();
        assert_eq!(last_row.window.h, 100);
        // row-major
        assert_eq!(tiles[4].index, TileIndex::new(0, 1));
    }

    #[test]
    fn one_pixel_raster_pads() {
        let tiles = partition_analysis_tiles(&meta(1, 1), 300);
        assert_eq!(tiles.len(), 1);
        assert_eq!(tiles[0].window, PixelWindow { x0: 0, y0: 0, w: 1, h: 1 });
        let img = Gray8::filled(1, 1, 9);
        let tile = extract_tile(&img, tiles[0].window, 300);
        assert_eq!((tile.width, tile.height), (300, 300));
        assert_eq!(tile.get(0, 0), 9);
        assert_eq!(tile.data.iter().filter(|&&v| v != 0).count(), 1);
    }

    #[test]
    fn adjacency() {
        let t = TileIndex::new(1, 1);
        assert!(t.is_adjacent(TileIndex::new(2, 2)));
        assert!(t.is_adjacent(TileIndex::new(1, 0)));
        assert!(!t.is_adjacent(t));
        assert!(!t.is_adjacent(TileIndex::new(3, 1)));
    }

    #[test]
    fn tile_index_json() {
        assert_eq!(serde_json::to_string(&TileIndex::new(3, 2)).unwrap(), "[3,2]");
    }
}
