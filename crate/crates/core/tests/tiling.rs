use geoloop_core::geo::{
    lonlat_to_tile, partition_analysis_tiles, render_display_tile, Crs, GeoTransform, Raster, RasterMeta,
    Resampling, TileAddress, TileGrid,
};
use geoloop_core::geo::Gray8;
use geoloop_core::RasterId;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn meta(width: u32, height: u32) -> RasterMeta {
    RasterMeta {
        id: RasterId(1),
        width,
        height,
        bands: 1,
        bit_depth: 8,
        crs: Crs::WebMercator,
        geotransform: GeoTransform::north_up(0.0, 0.0, 1.0),
    }
}

#[test]
fn partition_examples() {
    let t = partition_analysis_tiles(&meta(300, 300), 300);
    assert_eq!(t.len(), 1);
    assert_eq!((t[0].window.x0, t[0].window.y0, t[0].window.w, t[0].window.h), (0, 0, 300, 300));
    let t = partition_analysis_tiles(&meta(1000, 700), 300);
    assert_eq!(t.len(), 12);
    assert_eq!(t[3].window.w, 100);
    assert_eq!(t[11].window.h, 100);
    let t = partition_analysis_tiles(&meta(1, 1), 300);
    assert_eq!((t[0].window.w, t[0].window.h), (1, 1));
}

#[test]
fn partition_covers_every_pixel_once() {
    let sizes: Vec<u32> = (0..50).map(|i| 1 + i * 1199 / 49).collect();
    for &w in &sizes {
        for &h in sizes.iter().step_by(7) {
            let tiles = partition_analysis_tiles(&meta(w, h), 300);
            assert_eq!(tiles.len() as u32, w.div_ceil(300) * h.div_ceil(300));
            let mut hits = vec![0u8; (w * h) as usize];
            for t in &tiles {
                for y in t.window.y0..t.window.y0 + t.window.h {
                    for x in t.window.x0..t.window.x0 + t.window.w {
                        hits[(y * w + x) as usize] += 1;
                    }
                }
            }
            assert!(hits.iter().all(|&c| c == 1), "{w}x{h}");
        }
    }
}

fn tile_y_oracle(z: u8, lat: f64) -> f64 {
    // Gudermannian inverse in its tan(pi/4 + phi/2) form
    let phi = lat.to_radians();
    let merc = (std::f64::consts::FRAC_PI_4 + phi / 2.0).tan().ln();
    (1.0 - merc / std::f64::consts::PI) / 2.0 * f64::from(1u32 << z)
}

#[test]
fn lonlat_to_tile_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..10_000 {
        let z: u8 = rng.random_range(0..=10);
        let lon = rng.random_range(-180.0..180.0);
        let lat = rng.random_range(-85.05..85.05);
        let t = lonlat_to_tile(z, lon, lat).unwrap();
        let n = f64::from(1u32 << z);
        let fx = (lon + 180.0) / 360.0 * n;
        let fy = tile_y_oracle(z, lat);
        // boundary cases within rounding of an integer accept either side
        let ok = |got: u32, f: f64| got == f.floor() as u32 || (f - f.round()).abs() < 1e-9;
        assert!(ok(t.x, fx) && ok(t.y, fy), "z={z} lon={lon} lat={lat} -> {t:?}");
    }
    assert_eq!(lonlat_to_tile(1, 10.0, -10.0).unwrap(), TileAddress { z: 1, x: 1, y: 1 });
    assert_eq!(lonlat_to_tile(1, -10.0, 10.0).unwrap(), TileAddress { z: 1, x: 0, y: 0 });
    assert!(lonlat_to_tile(3, 0.0, 86.0).is_err());
}

#[test]
fn aligned_raster_renders_as_crop() {
    // 512x512 raster whose pixels coincide with display pixels at zoom 1
    let world = 2.0 * std::f64::consts::PI * 6_378_137.0;
    let px = world / 512.0;
    let mut g = Gray8::new(512, 512);
    for y in 0..512 {
        for x in 0..512 {
            g.set(x, y, ((x * 7 + y * 13) % 256) as u8);
        }
    }
    let raster = Raster::from_gray(RasterId(1), g.clone(), Crs::WebMercator, GeoTransform::north_up(-world / 2.0, world / 2.0, px)).unwrap();
    for (tx, ty) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
        let png = render_display_tile(&raster, TileAddress::new(1, tx, ty).unwrap(), Resampling::Bilinear).unwrap();
        let dec = png::Decoder::new(std::io::Cursor::new(png));
        let mut reader = dec.read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size().unwrap()];
        reader.next_frame(&mut buf).unwrap();
        for y in 0..256u32 {
            for x in 0..256u32 {
                let v = g.get(tx * 256 + x, ty * 256 + y);
                let i = ((y * 256 + x) * 4) as usize;
                assert_eq!(&buf[i..i + 4], &[v, v, v, 255], "tile ({tx},{ty}) pixel ({x},{y})");
            }
        }
    }
}

#[test]
fn render_is_deterministic_and_transparent_outside() {
    let raster = Raster::from_gray(
        RasterId(1),
        Gray8::filled(100, 100, 77),
        Crs::WebMercator,
        GeoTransform::north_up(1000.0, 1000.0, 10.0),
    )
    .unwrap();
    let inside = geoloop_core::geo::tiles_covering(&raster.meta, 14)[0];
    let a = render_display_tile(&raster, inside, Resampling::Nearest).unwrap();
    let b = render_display_tile(&raster, inside, Resampling::Nearest).unwrap();
    assert_eq!(a, b);
    let dec = png::Decoder::new(std::io::Cursor::new(a));
    let mut reader = dec.read_info().unwrap();
    let mut buf = vec![0; reader.output_buffer_size().unwrap()];
    reader.next_frame(&mut buf).unwrap();
    assert!(buf.chunks(4).all(|p| p[3] == 0 || p[..3] == [77, 77, 77]));
    assert!(buf.chunks(4).any(|p| p[3] == 255));
    let far = render_display_tile(&raster, TileAddress::new(14, 0, 0).unwrap(), Resampling::Bilinear).unwrap();
    let dec = png::Decoder::new(std::io::Cursor::new(far));
    let mut reader = dec.read_info().unwrap();
    let mut buf = vec![0; reader.output_buffer_size().unwrap()];
    reader.next_frame(&mut buf).unwrap();
    assert!(buf.chunks(4).all(|p| p[3] == 0));
}

proptest! {
    #[test]
    fn affine_round_trip(
        c in prop::array::uniform6(-1000.0f64..1000.0),
        col in -5000.0f64..5000.0,
        row in -5000.0f64..5000.0,
    ) {
        let gt = GeoTransform::from_gdal(c);
        prop_assume!(gt.determinant().abs() > 1e-3);
        let (x, y) = gt.pixel_to_geo(col, row);
        let (c2, r2) = gt.geo_to_pixel(x, y).unwrap();
        let tol = 1e-9 * (1.0 + col.abs().max(row.abs()));
        prop_assert!((c2 - col).abs() <= tol && (r2 - row).abs() <= tol, "{c2} {r2} vs {col} {row}");
    }

    #[test]
    fn tile_at_agrees_with_windows(w in 1u32..2000, h in 1u32..2000, fx in 0.0f64..1.0, fy in 0.0f64..1.0) {
        let grid = TileGrid::new(w, h, 300);
        let (x, y) = ((fx * f64::from(w)).floor() as u32, (fy * f64::from(h)).floor() as u32);
        let t = grid.tile_at(f64::from(x) + 0.5, f64::from(y) + 0.5);
        prop_assert!(grid.window(t).contains(x.min(w - 1), y.min(h - 1)));
    }
}
