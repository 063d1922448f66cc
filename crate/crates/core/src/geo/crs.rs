use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::GeoError;

/// Spherical Mercator radius (meters).
pub const EARTH_RADIUS: f64 = 6_378_137.0;

/// Supported coordinate reference systems, serialized as their EPSG code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Crs {
    /// EPSG:4326, longitude/latitude degrees.
    Wgs84,
    /// EPSG:3857, spherical Web Mercator meters.
    WebMercator,
}

impl Crs {
    pub fn epsg(self) -> u32 {
        match self {
            Crs::Wgs84 => 4326,
            Crs::WebMercator => 3857,
        }
    }

    /// Coordinates in this CRS to lon/lat degrees.
    pub fn to_lonlat(self, x: f64, y: f64) -> (f64, f64) {
        match self {
            Crs::Wgs84 => (x, y),
            Crs::WebMercator => mercator_to_lonlat(x, y),
        }
    }

    /// Lon/lat degrees to coordinates in this CRS.
    pub fn from_lonlat(self, lon: f64, lat: f64) -> (f64, f64) {
        match self {
            Crs::Wgs84 => (lon, lat),
            Crs::WebMercator => lonlat_to_mercator(lon, lat),
        }
    }

    /// Web Mercator meters to coordinates in this CRS.
    pub fn from_mercator(self, x: f64, y: f64) -> (f64, f64) {
        match self {
            Crs::Wgs84 => mercator_to_lonlat(x, y),
            Crs::WebMercator => (x, y),
        }
    }

    pub fn to_mercator(self, x: f64, y: f64) -> (f64, f64) {
        match self {
            Crs::Wgs84 => lonlat_to_mercator(x, y),
            Crs::WebMercator => (x, y),
        }
    }
}

impl TryFrom<u32> for Crs {
    type Error = GeoError;

    fn try_from(code: u32) -> Result<Self, GeoError> {
        match code {
            4326 => Ok(Crs::Wgs84),
            3857 => Ok(Crs::WebMercator),
            other => Err(GeoError::UnsupportedCrs(other)),
        }
    }
}

impl From<Crs> for u32 {
    fn from(crs: Crs) -> u32 {
        crs.epsg()
    }
}

pub fn lonlat_to_mercator(lon: f64, lat: f64) -> (f64, f64) {
    let x = EARTH_RADIUS * lon.to_radians();
    let y = EARTH_RADIUS * (PI / 4.0 + lat.to_radians() / 2.0).tan().ln();
    (x, y)
}

pub fn mercator_to_lonlat(x: f64, y: f64) -> (f64, f64) {
    let lon = (x / EARTH_RADIUS).to_degrees();
    let lat = (2.0 * (y / EARTH_RADIUS).exp().atan() - PI / 2.0).to_degrees();
    (lon, lat)
}
