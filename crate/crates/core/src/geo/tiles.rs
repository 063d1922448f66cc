use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{GeoError, EARTH_RADIUS};

/// Latitude limit of the square Web Mercator world.
pub const MAX_LATITUDE: f64 = 85.051_128_779_806_59;

/// Deepest zoom level accepted by tile math.
pub const MAX_ZOOM: u8 = 24;

/// XYZ (slippy map) tile address, origin at the top-left of the world.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TileAddress {
    pub z: u8,
    pub x: u32,
    pub y: u32,
}

impl TileAddress {
    pub fn new(z: u8, x: u32, y: u32) -> Result<Self, GeoError> {
        if z > MAX_ZOOM {
            return Err(GeoError::ZoomOutOfRange(z));
        }
        let n = 1u32 << z;
        if x >= n || y >= n {
            return Err(GeoError::InvalidTile { z, x, y });
        }
        Ok(Self { z, x, y })
    }
}

impl std::fmt::Display for TileAddress {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}/{}", self.z, self.x, self.y)
    }
}

pub fn lonlat_to_tile(z: u8, lon: f64, lat: f64) -> Result<TileAddress, GeoError> {
    if z > MAX_ZOOM {
        return Err(GeoError::ZoomOutOfRange(z));
    }
    if !lat.is_finite() || lat.abs() > MAX_LATITUDE {
        return Err(GeoError::LatitudeOutOfRange(lat));
    }
    if !lon.is_finite() || !(-180.0..180.0).contains(&lon) {
        return Err(GeoError::LongitudeOutOfRange(lon));
    }
    let n = f64::from(1u32 << z);
    let lat_r = lat.to_radians();
    let fx = (lon + 180.0) / 360.0 * n;
    let fy = (1.0 - (lat_r.tan() + 1.0 / lat_r.cos()).ln() / PI) / 2.0 * n;
    let max = (1u32 << z) - 1;
    let clamp = |v: f64| -> u32 {
        if v <= 0.0 {
            0
        } else {
            (v.floor() as u64).min(u64::from(max)) as u32
        }
    };
    Ok(TileAddress {
        z,
        x: clamp(fx),
        y: clamp(fy),
    })
}

/// Tile extent in Web Mercator meters as `(min_x, min_y, max_x, max_y)`.
pub fn tile_bounds_mercator(addr: TileAddress) -> (f64, f64, f64, f64) {
    let world = 2.0 * PI * EARTH_RADIUS;
    let size = world / f64::from(1u32 << addr.z);
    let min_x = -PI * EARTH_RADIUS + f64::from(addr.x) * size;
    let max_y = PI * EARTH_RADIUS - f64::from(addr.y) * size;
    (min_x, max_y - size, min_x + size, max_y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn root_tile() {
        for &(lon, lat) in &[(0.0, 0.0), (-179.0, 80.0), (179.9, -85.0)] {
            assert_eq!(lonlat_to_tile(0, lon, lat).unwrap(), TileAddress { z: 0, x: 0, y: 0 });
        }
    }

    #[test]
    fn zoom_one_quadrants() {
        assert_eq!(lonlat_to_tile(1, 10.0, -10.0).unwrap(), TileAddress { z: 1, x: 1, y: 1 });
        assert_eq!(lonlat_to_tile(1, -10.0, 10.0).unwrap(), TileAddress { z: 1, x: 0, y: 0 });
    }

    #[test]
    fn latitude_out_of_range() {
        assert!(matches!(
            lonlat_to_tile(3, 0.0, 86.0),
            Err(GeoError::LatitudeOutOfRange(_))
        ));
        assert!(lonlat_to_tile(3, 180.0, 0.0).is_err());
    }

    #[test]
    fn address_validation() {
        assert!(TileAddress::new(2, 3, 3).is_ok());
        assert!(TileAddress::new(2, 4, 0).is_err());
    }

    #[test]
    fn bounds_tile_the_world() {
        let (min_x, min_y, max_x, max_y) = tile_bounds_mercator(TileAddress { z: 0, x: 0, y: 0 });
        assert!((max_x - min_x - 2.0 * PI * EARTH_RADIUS).abs() < 1e-6);
        assert!((max_y + min_y).abs() < 1e-6);
    }
}
