//! Reference detector: threshold, morphological opening, 8-connected
//! labeling, area filtering, boundary tracing and simplification.

pub mod components;
pub mod morphology;
pub mod otsu;
pub mod params;
pub mod simplify;
pub mod trace;

pub use components::{label_components, Component, Labeling};
pub use params::{DetectorParams, Polarity, Threshold, MAX_OPEN_RADIUS};

use crate::geo::Gray8;
use crate::geometry::Polygon;
use crate::mask::BinaryMask;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DetectError {
    #[error("invalid detector parameters: {0}")]
    InvalidParams(String),
    #[error("multi-band input: flood mapping needs a single band, got {0}")]
    MultiBand(u8),
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("valid window {0}x{1} exceeds tile {2}x{3}")]
    WindowOutOfBounds(u32, u32, u32, u32),
}

/// Threshold value for the top-left `valid_w × valid_h` region of `image`.
pub fn resolve_threshold(image: &Gray8, valid_w: u32, valid_h: u32, threshold: Threshold) -> u8 {
    match threshold {
        Threshold::Value(v) => v,
        Threshold::Otsu => {
            let hist = otsu::histogram(
                (0..valid_h).flat_map(|y| (0..valid_w).map(move |x| (x, y))).map(|(x, y)| image.get(x, y)),
            );
            otsu::otsu_threshold(&hist)
        }
    }
}

/// Foreground mask. Pixels outside the valid region are background.
pub fn binarize(image: &Gray8, valid_w: u32, valid_h: u32, t: u8, polarity: Polarity) -> BinaryMask {
    BinaryMask::from_fn(image.width, image.height, |x, y| {
        x < valid_w
            && y < valid_h
            && match polarity {
                Polarity::BrightObjects => image.get(x, y) > t,
                Polarity::DarkObjects => image.get(x, y) <= t,
            }
    })
}

/// Thresholded, opened and labeled tile. Shared by detection and by the
/// adaptation search, which reuses one labeling across area bounds.
pub fn components(
    tile: &Gray8,
    valid_w: u32,
    valid_h: u32,
    threshold: Threshold,
    polarity: Polarity,
    open_radius: u32,
) -> Labeling {
    let t = resolve_threshold(tile, valid_w, valid_h, threshold);
    let mask = binarize(tile, valid_w, valid_h, t, polarity);
    label_components(&morphology::open(&mask, open_radius))
}

/// Traces and simplifies every component whose area is within bounds, in
/// order of first pixel.
pub fn polygons_from_labeling(labeling: &Labeling, params: &DetectorParams) -> Vec<Polygon> {
    labeling
        .components
        .iter()
        .filter(|c| params.area_in_bounds(c.area))
        .filter_map(|c| simplify::simplify_polygon(trace::trace_outline(labeling, c.label), params.simplify_epsilon))
        .collect()
}

/// Detects within the top-left `valid_w × valid_h` region of a (possibly
/// zero-padded) tile. Polygons are in tile pixel coordinates.
pub fn detect_window(
    tile: &Gray8,
    valid_w: u32,
    valid_h: u32,
    params: &DetectorParams,
) -> Result<Vec<Polygon>, DetectError> {
    params.validate()?;
    if valid_w > tile.width || valid_h > tile.height {
        return Err(DetectError::WindowOutOfBounds(valid_w, valid_h, tile.width, tile.height));
    }
    let labeling = components(tile, valid_w, valid_h, params.threshold, params.polarity, params.open_radius);
    Ok(polygons_from_labeling(&labeling, params))
}

pub fn detect_tile(tile: &Gray8, params: &DetectorParams) -> Result<Vec<Polygon>, DetectError> {
    detect_window(tile, tile.width, tile.height, params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patch_tile(patches: &[(u32, u32)]) -> Gray8 {
        let mut g = Gray8::new(300, 300);
        for &(px, py) in patches {
            for y in py..py + 10 {
                for x in px..px + 10 {
                    g.set(x, y, 200);
                }
            }
        }
        g
    }

    fn fixture_params(open_radius: u32) -> DetectorParams {
        DetectorParams {
            threshold: Threshold::Value(128),
            polarity: Polarity::BrightObjects,
            open_radius,
            min_area: 50,
            max_area: Some(5000),
            simplify_epsilon: 0.5,
        }
    }

    #[test]
    fn all_zero_tile_detects_nothing() {
        let g = Gray8::new(300, 300);
        assert!(detect_tile(&g, &DetectorParams::generic_structures()).unwrap().is_empty());
        let mut p = DetectorParams::generic_structures();
        p.threshold = Threshold::Otsu;
        assert!(detect_tile(&g, &p).unwrap().is_empty());
    }

    #[test]
    fn single_patch_has_pixel_count_area() {
        let g = patch_tile(&[(40, 60)]);
        let polys = detect_tile(&g, &fixture_params(0)).unwrap();
        assert_eq!(polys.len(), 1);
        assert_eq!(polys[0].area(), 100.0);
        assert_eq!(polys[0].bbox().min_x, 40.0);
        // opening trims the four corner pixels, simplification stays within
        // eps times the perimeter
        let polys = detect_tile(&g, &fixture_params(1)).unwrap();
        assert_eq!(polys.len(), 1);
        assert!((polys[0].area() - 100.0).abs() <= 40.0 * 0.5);
    }

    #[test]
    fn separated_patches_are_two_polygons_in_order() {
        let g = patch_tile(&[(100, 20), (20, 20), (32, 20)]);
        let polys = detect_tile(&g, &fixture_params(0)).unwrap();
        assert_eq!(polys.len(), 3);
        let xs: Vec<f64> = polys.iter().map(|p| p.bbox().min_x).collect();
        assert_eq!(xs, vec![20.0, 32.0, 100.0]);
    }

    #[test]
    fn area_bounds_filter() {
        let mut g = patch_tile(&[(20, 20)]);
        for y in 100..103 {
            for x in 100..103 {
                g.set(x, y, 255);
            }
        }
        let mut p = fixture_params(0);
        assert_eq!(detect_tile(&g, &p).unwrap().len(), 1);
        p.min_area = 5;
        assert_eq!(detect_tile(&g, &p).unwrap().len(), 2);
        p.max_area = Some(50);
        assert_eq!(detect_tile(&g, &p).unwrap().len(), 1);
    }

    #[test]
    fn padding_is_never_foreground() {
        let g = Gray8::filled(300, 300, 0);
        let mut p = DetectorParams::generic_flood();
        p.min_area = 1;
        p.open_radius = 0;
        let polys = detect_window(&g, 100, 50, &p).unwrap();
        assert_eq!(polys.len(), 1);
        assert_eq!(polys[0].area(), 5000.0);
        p.open_radius = 2;
        let b = detect_window(&g, 100, 50, &p).unwrap()[0].bbox();
        assert!(b.max_x <= 100.0 && b.max_y <= 50.0);
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = DetectorParams::generic_structures();
        p.min_area = 10_000;
        assert!(matches!(
            detect_tile(&Gray8::new(10, 10), &p),
            Err(DetectError::InvalidParams(_))
        ));
    }

    #[test]
    fn deterministic() {
        let mut g = Gray8::new(300, 300);
        let mut s = 0x9e3779b97f4a7c15u64;
        for v in g.data.iter_mut() {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            *v = (s % 256) as u8;
        }
        let mut p = DetectorParams::generic_structures();
        p.min_area = 3;
        let a = detect_tile(&g, &p).unwrap();
        let b = detect_tile(&g, &p).unwrap();
        assert_eq!(a, b);
        assert!(!a.is_empty());
    }
}
