//! Flood mapping: dark-polarity thresholding with closing then opening over
//! the full raster.

use crate::detect::{self, morphology, DetectError, DetectorParams, Polarity};
use crate::geo::{Gray8, Raster};
use crate::geometry::Polygon;
use crate::mask::BinaryMask;

#[derive(Debug, Clone)]
pub struct FloodMap {
    /// Water mask at full raster resolution, after morphology. Not filtered
    /// by area.
    pub mask: BinaryMask,
    /// Water bodies within the area bounds, in raster pixel coordinates.
    pub polygons: Vec<Polygon>,
    pub threshold: u8,
}

pub fn flood_map(raster: &Raster, params: &DetectorParams) -> Result<FloodMap, DetectError> {
    if raster.meta.bands != 1 {
        return Err(DetectError::MultiBand(raster.meta.bands));
    }
    flood_map_gray(&raster.to_gray8(), params)
}

pub fn flood_map_gray(image: &Gray8, params: &DetectorParams) -> Result<FloodMap, DetectError> {
    params.validate()?;
    if params.polarity != Polarity::DarkObjects {
        return Err(DetectError::InvalidParams("flood mapping requires dark_objects polarity".into()));
    }
    let t = detect::resolve_threshold(image, image.width, image.height, params.threshold);
    let water = detect::binarize(image, image.width, image.height, t, Polarity::DarkObjects);
    let closed = morphology::close(&water, params.open_radius);
    let mask = morphology::open(&closed, params.open_radius);
    let labeling = detect::label_components(&mask);
    let polygons = detect::polygons_from_labeling(&labeling, params);
    Ok(FloodMap {
        mask,
        polygons,
        threshold: t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{Crs, GeoTransform};
    use crate::ids::RasterId;
    use crate::metrics::pixel_report;
    use crate::synth::{generate_river_scene, RiverSceneSpec};

    #[test]
    fn bright_raster_has_empty_mask() {
        let g = Gray8::filled(64, 64, 200);
        let f = flood_map_gray(&g, &DetectorParams::generic_flood()).unwrap();
        assert_eq!(f.mask.count(), 0);
        assert!(f.polygons.is_empty());
    }

    #[test]
    fn noiseless_river_is_exact() {
        let scene = generate_river_scene(&RiverSceneSpec::new(300, 400, 0, 11)).unwrap();
        let f = flood_map_gray(&scene.image, &DetectorParams::generic_flood()).unwrap();
        assert_eq!(f.mask, scene.truth);
        let report = pixel_report(&scene.truth, &f.mask).unwrap();
        assert_eq!(report.pixel_accuracy, Some(1.0));
        assert_eq!(f.polygons.len(), 1);
    }

    #[test]
    fn rejects_rgb_and_bright_polarity() {
        let meta_rgb = Raster::new(
            crate::geo::RasterMeta {
                id: RasterId(1),
                width: 2,
                height: 2,
                bands: 3,
                bit_depth: 8,
                crs: Crs::Wgs84,
                geotransform: GeoTransform::north_up(0.0, 0.0, 1.0),
            },
            vec![0; 12],
        )
        .unwrap();
        assert_eq!(
            flood_map(&meta_rgb, &DetectorParams::generic_flood()).unwrap_err(),
            DetectError::MultiBand(3)
        );
        let g = Gray8::new(8, 8);
        assert!(matches!(
            flood_map_gray(&g, &DetectorParams::generic_structures()),
            Err(DetectError::InvalidParams(_))
        ));
    }
}
