//! Seeded synthetic scenes with exact ground truth: camps of rectangular
//! structures on textured ground, and rivers for flood mapping.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geo::{Crs, GeoError, GeoTransform, Gray8, Raster};
use crate::geometry::Polygon;
use crate::ids::RasterId;
use crate::mask::BinaryMask;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("could not place {requested} structures (placed {placed})")]
    Crowded { requested: usize, placed: usize },
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
}

/// Camp scene parameters. Structure sides are uniform in
/// `[size_min, size_max]`; brightness is drawn from `bright_range` with
/// probability `bright_fraction` and from `dim_range` otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampSceneSpec {
    pub width: u32,
    pub height: u32,
    pub n_structures: usize,
    pub size_min: u32,
    pub size_max: u32,
    /// Minimum background gap between structures.
    pub min_gap: u32,
    pub bright_fraction: f64,
    pub bright_range: (u8, u8),
    pub dim_range: (u8, u8),
    pub structure_noise: u8,
    pub background_mean: u8,
    pub texture_amplitude: f64,
    pub background_noise: u8,
    pub seed: u64,
}

impl CampSceneSpec {
    /// 2000×2000 px scene with 400 structures, a quarter of them dim.
    pub fn benchmark(seed: u64) -> Self {
        Self {
            width: 2000,
            height: 2000,
            n_structures: 400,
            size_min: 7,
            size_max: 16,
            min_gap: 3,
            bright_fraction: 0.75,
            bright_range: (165, 200),
            dim_range: (118, 140),
            structure_noise: 6,
            background_mean: 70,
            texture_amplitude: 15.0,
            background_noise: 12,
            seed,
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.to_string()));
        if self.width == 0 || self.height == 0 {
            return bad("empty raster");
        }
        if self.size_min == 0 || self.size_min > self.size_max {
            return bad("size_min must be in 1..=size_max");
        }
        if self.size_max + 2 * self.min_gap > self.width.min(self.height) && self.n_structures > 0 {
            return bad("structures do not fit the raster");
        }
        if !(0.0..=1.0).contains(&self.bright_fraction) {
            return bad("bright_fraction outside [0, 1]");
        }
        if self.bright_range.0 > self.bright_range.1 || self.dim_range.0 > self.dim_range.1 {
            return bad("empty intensity range");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Structure {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    pub intensity: u8,
}

impl Structure {
    pub fn polygon(&self) -> Polygon {
        Polygon::rect(
            f64::from(self.x),
            f64::from(self.y),
            f64::from(self.x + self.w),
            f64::from(self.y + self.h),
        )
    }
}

#[derive(Debug, Clone)]
pub struct CampScene {
    pub image: Gray8,
    pub structures: Vec<Structure>,
}

impl CampScene {
    /// Ground-truth footprints in pixel coordinates, in placement order.
    pub fn truth(&self) -> Vec<Polygon> {
        self.structures.iter().map(Structure::polygon).collect()
    }

    pub fn raster(&self, id: RasterId) -> Result<Raster, GeoError> {
        Raster::from_gray(id, self.image.clone(), Crs::WebMercator, scene_transform())
    }
}

/// Half-metre pixels in Web Mercator, north-up.
pub fn scene_transform() -> GeoTransform {
    GeoTransform::north_up(4_105_000.0, 285_000.0, 0.5)
}

fn noise(rng: &mut ChaCha8Rng, amplitude: u8) -> i32 {
    if amplitude == 0 {
        0
    } else {
        rng.random_range(-i32::from(amplitude)..=i32::from(amplitude))
    }
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

pub fn generate_camp_scene(spec: &CampSceneSpec) -> Result<CampScene, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (w, h) = (spec.width, spec.height);
    let gap = spec.min_gap;

    let mut structures: Vec<Structure> = Vec::with_capacity(spec.n_structures);
    let max_attempts = 2000 * spec.n_structures.max(1);
    let mut attempts = 0;
    while structures.len() < spec.n_structures {
        attempts += 1;
        if attempts > max_attempts {
            return Err(SynthError::Crowded {
                requested: spec.n_structures,
                placed: structures.len(),
            });
        }
        let sw = rng.random_range(spec.size_min..=spec.size_max);
        let sh = rng.random_range(spec.size_min..=spec.size_max);
        let x = rng.random_range(gap..=w - sw - gap);
        let y = rng.random_range(gap..=h - sh - gap);
        let clear = structures.iter().all(|s| {
            x + sw + gap <= s.x || s.x + s.w + gap <= x || y + sh + gap <= s.y || s.y + s.h + gap <= y
        });
        if !clear {
            continue;
        }
        let range = if rng.random_bool(spec.bright_fraction) {
            spec.bright_range
        } else {
            spec.dim_range
        };
        let intensity = rng.random_range(range.0..=range.1);
        structures.push(Structure {
            x,
            y,
            w: sw,
            h: sh,
            intensity,
        });
    }

    let fx = rng.random_range(0.0..std::f64::consts::TAU);
    let fy = rng.random_range(0.0..std::f64::consts::TAU);
    let mut image = Gray8::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let texture = spec.texture_amplitude
                * (f64::from(x) / 37.0 + fx).sin()
                * (f64::from(y) / 53.0 + fy).cos();
            let v = f64::from(spec.background_mean) + texture + f64::from(noise(&mut rng, spec.background_noise));
            image.set(x, y, clamp_u8(v));
        }
    }
    for s in &structures {
        for y in s.y..s.y + s.h {
            for x in s.x..s.x + s.w {
                let v = i32::from(s.intensity) + noise(&mut rng, spec.structure_noise);
                image.set(x, y, v.clamp(0, 255) as u8);
            }
        }
    }
    Ok(CampScene { image, structures })
}

/// River scene parameters. Both banks random-walk by at most one pixel per
/// row, which keeps the water mask invariant under radius-1 closing and
/// opening.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiverSceneSpec {
    pub width: u32,
    pub height: u32,
    pub water: u8,
    pub land: u8,
    pub min_width: u32,
    pub max_width: u32,
    pub noise: u8,
    pub seed: u64,
}

impl RiverSceneSpec {
    pub fn new(width: u32, height: u32, noise: u8, seed: u64) -> Self {
        Self {
            width,
            height,
            water: 30,
            land: 180,
            min_width: (width / 20).max(3),
            max_width: (width / 6).max(4),
            noise,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RiverScene {
    pub image: Gray8,
    pub truth: BinaryMask,
}

impl RiverScene {
    pub fn raster(&self, id: RasterId) -> Result<Raster, GeoError> {
        Raster::from_gray(id, self.image.clone(), Crs::WebMercator, scene_transform())
    }
}

/// Minimum land margin kept on either side of the river.
const BANK_MARGIN: u32 = 3;

pub fn generate_river_scene(spec: &RiverSceneSpec) -> Result<RiverScene, SynthError> {
    if spec.min_width < 3 || spec.min_width > spec.max_width {
        return Err(SynthError::InvalidSpec("river width bounds must satisfy 3 <= min <= max".into()));
    }
    if spec.max_width + 2 * BANK_MARGIN + 2 > spec.width || spec.height == 0 {
        return Err(SynthError::InvalidSpec("river does not fit the raster".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (w, h) = (spec.width as i64, spec.height as i64);
    let lo_bound = BANK_MARGIN as i64;
    let hi_bound = w - 1 - BANK_MARGIN as i64;
    let (min_w, max_w) = (spec.min_width as i64, spec.max_width as i64);
    let mut left = (w - max_w) / 2;
    let mut right = left + (min_w + max_w) / 2 - 1;

    let mut truth = BinaryMask::new(spec.width, spec.height);
    for y in 0..h {
        if y > 0 {
            let step_l: i64 = rng.random_range(-1..=1);
            let step_r: i64 = rng.random_range(-1..=1);
            let (nl, nr) = (left + step_l, right + step_r);
            let width = nr - nl + 1;
            if nl >= lo_bound && nr <= hi_bound && (min_w..=max_w).contains(&width) {
                left = nl;
                right = nr;
            }
        }
        for x in left..=right {
            truth.set(x as u32, y as u32, true);
        }
    }
    let mut image = Gray8::new(spec.width, spec.height);
    for y in 0..spec.height {
        for x in 0..spec.width {
            let base = if truth.get(x, y) { spec.water } else { spec.land };
            let v = i32::from(base) + noise(&mut rng, spec.noise);
            image.set(x, y, v.clamp(0, 255) as u8);
        }
    }
    Ok(RiverScene { image, truth })
}
