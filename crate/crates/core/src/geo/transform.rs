use serde::{Deserialize, Serialize};

use super::GeoError;

/// Six-coefficient affine map from (column, row) pixel space to CRS units.
///
/// ```text
/// x = origin_x + col * pixel_w + row * row_rot
/// y = origin_y + col * col_rot + row * pixel_h
/// ```
///
/// Serialized in GDAL coefficient order
/// `[origin_x, pixel_w, row_rot, origin_y, col_rot, pixel_h]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 6]", into = "[f64; 6]")]
pub struct GeoTransform {
    pub origin_x: f64,
    pub pixel_w: f64,
    pub row_rot: f64,
    pub origin_y: f64,
    pub col_rot: f64,
    /// Negative for north-up images.
    pub pixel_h: f64,
}

impl GeoTransform {
    pub fn north_up(origin_x: f64, origin_y: f64, pixel_size: f64) -> Self {
        Self {
            origin_x,
            pixel_w: pixel_size,
            row_rot: 0.0,
            origin_y,
            col_rot: 0.0,
            pixel_h: -pixel_size,
        }
    }

    pub fn from_gdal(c: [f64; 6]) -> Self {
        Self {
            origin_x: c[0],
            pixel_w: c[1],
            row_rot: c[2],
            origin_y: c[3],
            col_rot: c[4],
            pixel_h: c[5],
        }
    }

    pub fn to_gdal(self) -> [f64; 6] {
        [
            self.origin_x,
            self.pixel_w,
            self.row_rot,
            self.origin_y,
            self.col_rot,
            self.pixel_h,
        ]
    }

    pub fn determinant(&self) -> f64 {
        self.pixel_w * self.pixel_h - self.row_rot * self.col_rot
    }

    pub fn is_invertible(&self) -> bool {
        let det = self.determinant();
        det.is_finite() && det != 0.0
    }

    /// Fractional pixel coordinates to CRS coordinates.
    pub fn pixel_to_geo(&self, col: f64, row: f64) -> (f64, f64) {
        (
            self.origin_x + col * self.pixel_w + row * self.row_rot,
            self.origin_y + col * self.col_rot + row * self.pixel_h,
        )
    }

    /// Exact affine inverse of [`pixel_to_geo`](Self::pixel_to_geo).
    pub fn geo_to_pixel(&self, x: f64, y: f64) -> Result<(f64, f64), GeoError> {
        let det = self.determinant();
        if !det.is_finite() || det == 0.0 {
            return Err(GeoError::SingularTransform(det));
        }
        let dx = x - self.origin_x;
        let dy = y - self.origin_y;
        let col = (self.pixel_h * dx - self.row_rot * dy) / det;
        let row = (self.pixel_w * dy - self.col_rot * dx) / det;
        Ok((col, row))
    }
}

impl From<[f64; 6]> for GeoTransform {
    fn from(c: [f64; 6]) -> Self {
        Self::from_gdal(c)
    }
}

impl From<GeoTransform> for [f64; 6] {
    fn from(gt: GeoTransform) -> Self {
        gt.to_gdal()
    }
}
