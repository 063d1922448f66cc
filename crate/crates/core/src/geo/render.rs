use serde::{Deserialize, Serialize};

use super::{tile_bounds_mercator, GeoError, Raster, RasterMeta, TileAddress, EARTH_RADIUS, MAX_ZOOM};

/// Display tiles are square RGBA images of this size.
pub const DISPLAY_TILE_SIZE: u32 = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resampling {
    Nearest,
    #[default]
    Bilinear,
}

/// Renders one XYZ tile of the raster as a 256x256 RGBA PNG. Pixels outside
/// the raster footprint are fully transparent.
pub fn render_display_tile(raster: &Raster, addr: TileAddress, resampling: Resampling) -> Result<Vec<u8>, GeoError> {
    let rgba = render_rgba(raster, addr, resampling)?;
    Ok(encode_rgba_png(&rgba, DISPLAY_TILE_SIZE, DISPLAY_TILE_SIZE))
}

pub(crate) fn render_rgba(raster: &Raster, addr: TileAddress, resampling: Resampling) -> Result<Vec<u8>, GeoError> {
    let meta = &raster.meta;
    let size = DISPLAY_TILE_SIZE as usize;
    let (min_x, _, max_x, max_y) = tile_bounds_mercator(addr);
    let step = (max_x - min_x) / size as f64;
    let (w, h) = (f64::from(meta.width), f64::from(meta.height));
    let mut out = vec![0u8; size * size * 4];
    for j in 0..size {
        let my = max_y - (j as f64 + 0.5) * step;
        for i in 0..size {
            let mx = min_x + (i as f64 + 0.5) * step;
            let (x, y) = meta.crs.from_mercator(mx, my);
            let (col, row) = meta.geotransform.geo_to_pixel(x, y)?;
            if !(col >= 0.0 && col < w && row >= 0.0 && row < h) {
                continue;
            }
            let rgb = match resampling {
                Resampling::Nearest => raster.sample8(col as u32, row as u32),
                Resampling::Bilinear => bilinear(raster, col, row),
            };
            let px = &mut out[(j * size + i) * 4..(j * size + i) * 4 + 4];
            px[..3].copy_from_slice(&rgb);
            px[3] = 255;
        }
    }
    Ok(out)
}

fn bilinear(raster: &Raster, col: f64, row: f64) -> [u8; 3] {
    let max_c = raster.meta.width as i64 - 1;
    let max_r = raster.meta.height as i64 - 1;
    let u = col - 0.5;
    let v = row - 0.5;
    let c0 = u.floor();
    let r0 = v.floor();
    let fx = u - c0;
    let fy = v - r0;
    let clamp_c = |c: i64| c.clamp(0, max_c) as u32;
    let clamp_r = |r: i64| r.clamp(0, max_r) as u32;
    let (c0, r0) = (c0 as i64, r0 as i64);
    let p00 = raster.sample8(clamp_c(c0), clamp_r(r0));
    let p10 = raster.sample8(clamp_c(c0 + 1), clamp_r(r0));
    let p01 = raster.sample8(clamp_c(c0), clamp_r(r0 + 1));
    let p11 = raster.sample8(clamp_c(c0 + 1), clamp_r(r0 + 1));
    let mut out = [0u8; 3];
    for b in 0..3 {
        let top = f64::from(p00[b]) * (1.0 - fx) + f64::from(p10[b]) * fx;
        let bottom = f64::from(p01[b]) * (1.0 - fx) + f64::from(p11[b]) * fx;
        out[b] = (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8;
    }
    out
}

pub fn encode_rgba_png(rgba: &[u8], width: u32, height: u32) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, width, height);
        encoder.set_color(png::ColorType::Rgba);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header().expect("png header");
        writer.write_image_data(rgba).expect("png data");
    }
    out
}

/// Footprint bounding box in Web Mercator meters `(min_x, min_y, max_x, max_y)`.
fn footprint_mercator(meta: &RasterMeta) -> (f64, f64, f64, f64) {
    let (w, h) = (f64::from(meta.width), f64::from(meta.height));
    let corners = [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)];
    let mut b = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (c, r) in corners {
        let (x, y) = meta.geotransform.pixel_to_geo(c, r);
        let (mx, my) = meta.crs.to_mercator(x, y);
        b = (b.0.min(mx), b.1.min(my), b.2.max(mx), b.3.max(my));
    }
    b
}

/// Zoom at which one display-tile pixel is no larger than one raster pixel.
pub fn native_zoom(meta: &RasterMeta) -> u8 {
    let (cx, cy) = (f64::from(meta.width) / 2.0, f64::from(meta.height) / 2.0);
    let (x0, y0) = meta.geotransform.pixel_to_geo(cx, cy);
    let (x1, y1) = meta.geotransform.pixel_to_geo(cx + 1.0, cy);
    let a = meta.crs.to_mercator(x0, y0);
    let b = meta.crs.to_mercator(x1, y1);
    let pixel = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
    let world = 2.0 * std::f64::consts::PI * EARTH_RADIUS;
    let z = (world / (f64::from(DISPLAY_TILE_SIZE) * pixel)).log2();
    let z = if (z - z.round()).abs() < 1e-9 { z.round() } else { z.ceil() };
    z.clamp(0.0, f64::from(MAX_ZOOM)) as u8
}

/// Zoom range for a raster pyramid: from the level where the footprint fits
/// in about one tile up to [`native_zoom`].
pub fn pyramid_zooms(meta: &RasterMeta) -> std::ops::RangeInclusive<u8> {
    let native = native_zoom(meta);
    let (min_x, min_y, max_x, max_y) = footprint_mercator(meta);
    let extent = (max_x - min_x).max(max_y - min_y);
    let world = 2.0 * std::f64::consts::PI * EARTH_RADIUS;
    let fit = (world / extent).log2().floor().clamp(0.0, f64::from(MAX_ZOOM)) as u8;
    fit.min(native)..=native
}

/// Every tile at zoom `z` intersecting the raster footprint, row-major.
pub fn tiles_covering(meta: &RasterMeta, z: u8) -> Vec<TileAddress> {
    let (min_x, min_y, max_x, max_y) = footprint_mercator(meta);
    let world = 2.0 * std::f64::consts::PI * EARTH_RADIUS;
    let n = 1u64 << z;
    let size = world / n as f64;
    let half = world / 2.0;
    let to_idx = |v: f64| -> u64 { ((v / size).floor().max(0.0) as u64).min(n - 1) };
    let x0 = to_idx((min_x + half) + size * 1e-9);
    let x1 = to_idx((max_x + half) - size * 1e-9);
    let y0 = to_idx((half - max_y) + size * 1e-9);
    let y1 = to_idx((half - min_y) - size * 1e-9);
    let mut out = Vec::new();
    for y in y0..=y1 {
        for x in x0..=x1 {
            out.push(TileAddress { z, x: x as u32, y: y as u32 });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{Crs, GeoTransform, Gray8};
    use crate::RasterId;
    use std::f64::consts::PI;

    fn decode(png_bytes: &[u8]) -> Vec<u8> {
        let mut reader = png::Decoder::new(std::io::Cursor::new(png_bytes)).read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size().unwrap()];
        let info = reader.next_frame(&mut buf).unwrap();
        assert_eq!((info.width, info.height), (256, 256));
        buf
    }

    /// A raster aligned with the tile grid at zoom `z`, covering 2x2 tiles
    /// starting at (x0, y0).
    fn aligned_raster(z: u8, x0: u32, y0: u32, image: Gray8) -> Raster {
        let world = 2.0 * PI * EARTH_RADIUS;
        let tile = world / f64::from(1u32 << z);
        let gt = GeoTransform::north_up(
            -PI * EARTH_RADIUS + f64::from(x0) * tile,
            PI * EARTH_RADIUS - f64::from(y0) * tile,
            tile / 256.0,
        );
        Raster::from_gray(RasterId(1), image, Crs::WebMercator, gt).unwrap()
    }

    #[test]
    fn outside_footprint_is_transparent() {
        let raster = aligned_raster(10, 100, 200, Gray8::filled(512, 512, 77));
        let png = render_display_tile(&raster, TileAddress { z: 10, x: 500, y: 500 }, Resampling::Bilinear).unwrap();
        assert!(decode(&png).iter().all(|&b| b == 0));
    }

    #[test]
    fn constant_raster_nearest() {
        let raster = aligned_raster(10, 100, 200, Gray8::filled(512, 512, 77));
        // zoom 9 tile covering the raster partially
        let addr = TileAddress { z: 9, x: 50, y: 100 };
        let rgba = decode(&render_display_tile(&raster, addr, Resampling::Nearest).unwrap());
        let mut opaque = 0;
        for px in rgba.chunks(4) {
            if px[3] == 255 {
                opaque += 1;
                assert_eq!(&px[..3], &[77, 77, 77]);
            } else {
                assert_eq!(px, &[0, 0, 0, 0]);
            }
        }
        assert!(opaque > 0);
    }

    #[test]
    fn native_zoom_of_aligned_raster() {
        let raster = aligned_raster(12, 5, 5, Gray8::filled(512, 512, 1));
        assert_eq!(native_zoom(&raster.meta), 12);
        let tiles = tiles_covering(&raster.meta, 12);
        assert_eq!(tiles.len(), 4);
        assert!(pyramid_zooms(&raster.meta).contains(&11));
    }

    #[test]
    fn renders_are_deterministic() {
        let mut img = Gray8::new(512, 512);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i * 31 % 251) as u8;
        }
        let raster = aligned_raster(10, 100, 200, img);
        let addr = TileAddress { z: 9, x: 50, y: 100 };
        let a = render_display_tile(&raster, addr, Resampling::Bilinear).unwrap();
        let b = render_display_tile(&raster, addr, Resampling::Bilinear).unwrap();
        assert_eq!(a, b);
    }
}
