use std::io::Cursor;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Crs, GeoError, GeoTransform};
use crate::RasterId;

/// Upload sidecar: exactly `{"crs": <epsg>, "geotransform": [gt0..gt5]}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub crs: Crs,
    pub geotransform: GeoTransform,
}

impl Sidecar {
    pub fn parse(json: &[u8]) -> Result<Self, GeoError> {
        let sidecar: Sidecar =
            serde_json::from_slice(json).map_err(|e| GeoError::InvalidSidecar(e.to_string()))?;
        if !sidecar.geotransform.is_invertible() {
            return Err(GeoError::SingularTransform(sidecar.geotransform.determinant()));
        }
        Ok(sidecar)
    }
}

/// Raster description without the pixel buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterMeta {
    pub id: RasterId,
    pub width: u32,
    pub height: u32,
    pub bands: u8,
    pub bit_depth: u8,
    pub crs: Crs,
    pub geotransform: GeoTransform,
}

impl RasterMeta {
    pub fn byte_len(&self) -> usize {
        self.width as usize * self.height as usize * self.bands as usize * (self.bit_depth as usize / 8)
    }

    /// Raster pixel coordinates to lon/lat degrees.
    pub fn pixel_to_lonlat(&self, col: f64, row: f64) -> (f64, f64) {
        let (x, y) = self.geotransform.pixel_to_geo(col, row);
        self.crs.to_lonlat(x, y)
    }

    pub fn lonlat_to_pixel(&self, lon: f64, lat: f64) -> Result<(f64, f64), GeoError> {
        let (x, y) = self.crs.from_lonlat(lon, lat);
        self.geotransform.geo_to_pixel(x, y)
    }
}

/// An ingested, immutable raster. The pixel store is row-major and
/// band-interleaved; 16-bit samples are big-endian as in PNG.
#[derive(Debug, Clone)]
pub struct Raster {
    pub meta: RasterMeta,
    pixels: Arc<Vec<u8>>,
}

impl Raster {
    pub fn new(meta: RasterMeta, pixels: Vec<u8>) -> Result<Self, GeoError> {
        if meta.bands != 1 && meta.bands != 3 {
            return Err(GeoError::UnsupportedImage(format!("{} bands", meta.bands)));
        }
        if meta.bit_depth != 8 && meta.bit_depth != 16 {
            return Err(GeoError::UnsupportedImage(format!("bit depth {}", meta.bit_depth)));
        }
        if meta.width == 0 || meta.height == 0 {
            return Err(GeoError::UnsupportedImage("empty raster".into()));
        }
        if !meta.geotransform.is_invertible() {
            return Err(GeoError::SingularTransform(meta.geotransform.determinant()));
        }
        if pixels.len() != meta.byte_len() {
            return Err(GeoError::BufferSize {
                expected: meta.byte_len(),
                actual: pixels.len(),
            });
        }
        Ok(Self {
            meta,
            pixels: Arc::new(pixels),
        })
    }

    /// 8-bit grayscale raster from a [`Gray8`] image.
    pub fn from_gray(id: RasterId, image: Gray8, crs: Crs, geotransform: GeoTransform) -> Result<Self, GeoError> {
        let meta = RasterMeta {
            id,
            width: image.width,
            height: image.height,
            bands: 1,
            bit_depth: 8,
            crs,
            geotransform,
        };
        Raster::new(meta, image.data)
    }

    /// Decodes an 8/16-bit grayscale or RGB PNG with its sidecar.
    pub fn from_png(id: RasterId, png_bytes: &[u8], sidecar: Sidecar) -> Result<Self, GeoError> {
        let mut decoder = png::Decoder::new(Cursor::new(png_bytes));
        decoder.set_transformations(png::Transformations::IDENTITY);
        let mut reader = decoder.read_info().map_err(|e| GeoError::Decode(e.to_string()))?;
        let (color, depth) = reader.output_color_type();
        let bands = match color {
            png::ColorType::Grayscale => 1,
            png::ColorType::Rgb => 3,
            other => {
                return Err(GeoError::UnsupportedImage(format!("color type {other:?}")));
            }
        };
        let bit_depth = match depth {
            png::BitDepth::Eight => 8,
            png::BitDepth::Sixteen => 16,
            other => return Err(GeoError::UnsupportedImage(format!("bit depth {other:?}"))),
        };
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| GeoError::Decode("image too large".into()))?;
        let mut buf = vec![0u8; size];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| GeoError::Decode(e.to_string()))?;
        buf.truncate(info.buffer_size());
        let meta = RasterMeta {
            id,
            width: info.width,
            height: info.height,
            bands,
            bit_depth,
            crs: sidecar.crs,
            geotransform: sidecar.geotransform,
        };
        Raster::new(meta, buf)
    }

    /// Re-encodes the raster as PNG (lossless, same depth and bands).
    pub fn to_png(&self) -> Vec<u8> {
        let mut out = Vec::new();
        {
            let mut encoder = png::Encoder::new(&mut out, self.meta.width, self.meta.height);
            encoder.set_color(if self.meta.bands == 1 {
                png::ColorType::Grayscale
            } else {
                png::ColorType::Rgb
            });
            encoder.set_depth(if self.meta.bit_depth == 8 {
                png::BitDepth::Eight
            } else {
                png::BitDepth::Sixteen
            });
            let mut writer = encoder.write_header().expect("png header");
            writer.write_image_data(&self.pixels).expect("png data");
        }
        out
    }

    pub fn id(&self) -> RasterId {
        self.meta.id
    }

    pub fn width(&self) -> u32 {
        self.meta.width
    }

    pub fn height(&self) -> u32 {
        self.meta.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// Band samples at a pixel, reduced to 8 bits.
    pub fn sample8(&self, col: u32, row: u32) -> [u8; 3] {
        let bands = self.meta.bands as usize;
        let bytes = self.meta.bit_depth as usize / 8;
        let base = (row as usize * self.meta.width as usize + col as usize) * bands * bytes;
        let mut out = [0u8; 3];
        for (b, slot) in out.iter_mut().enumerate().take(bands) {
            let off = base + b * bytes;
            *slot = if bytes == 1 {
                self.pixels[off]
            } else {
                scale16(u16::from_be_bytes([self.pixels[off], self.pixels[off + 1]]))
            };
        }
        if bands == 1 {
            out[1] = out[0];
            out[2] = out[0];
        }
        out
    }

    /// Grayscale view: RGB is converted with luminance
    /// `0.299 R + 0.587 G + 0.114 B`, rounded half-up.
    pub fn to_gray8(&self) -> Gray8 {
        let w = self.meta.width as usize;
        let h = self.meta.height as usize;
        let mut data = Vec::with_capacity(w * h);
        if self.meta.bands == 1 && self.meta.bit_depth == 8 {
            data.extend_from_slice(&self.pixels);
        } else {
            for row in 0..h as u32 {
                for col in 0..w as u32 {
                    let s = self.sample8(col, row);
                    data.push(if self.meta.bands == 1 { s[0] } else { luminance(s) });
                }
            }
        }
        Gray8 {
            width: self.meta.width,
            height: self.meta.height,
            data,
        }
    }
}

/// 16-bit to 8-bit sample scaling, rounded to nearest.
fn scale16(v: u16) -> u8 {
    ((u32::from(v) + 128) / 257).min(255) as u8
}

/// `0.299 R + 0.587 G + 0.114 B` rounded half-up, in exact integer arithmetic.
pub(crate) fn luminance([r, g, b]: [u8; 3]) -> u8 {
    let weighted = 299 * u32::from(r) + 587 * u32::from(g) + 114 * u32::from(b);
    ((weighted + 500) / 1000) as u8
}

/// Single-band 8-bit image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gray8 {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl Gray8 {
    pub fn new(width: u32, height: u32) -> Self {
        Self::filled(width, height, 0)
    }

    pub fn filled(width: u32, height: u32, value: u8) -> Self {
        Self {
            width,
            height,
            data: vec![value; width as usize * height as usize],
        }
    }

    pub fn from_vec(width: u32, height: u32, data: Vec<u8>) -> Option<Self> {
        (data.len() == width as usize * height as usize).then_some(Self { width, height, data })
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: u8) {
        let w = self.width as usize;
        self.data[y as usize * w + x as usize] = v;
    }
}
