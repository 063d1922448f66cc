//! Model adaptation as exhaustive detector-parameter search.
//!
//! Every candidate is run on the corrected tiles and scored by micro F1
//! (counts summed over tiles, IoU 0.5). The parent is always a candidate, so
//! the selected F1 never falls below the parent's. Ties go to the candidate
//! with the fewest fields changed from the parent, then to the smallest
//! `(threshold, open_radius, min_area, max_area)` with an unbounded
//! `max_area` ordering last.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detect::{self, trace, DetectError, DetectorParams, Threshold};
use crate::geo::Gray8;
use crate::geometry::Polygon;
use crate::metrics::{match_detections, Counts, MetricsReport, DEFAULT_IOU_THRESHOLD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub thresholds: Vec<Threshold>,
    pub open_radii: Vec<u32>,
    pub min_areas: Vec<u64>,
    pub max_areas: Vec<Option<u64>>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        let mut thresholds = vec![Threshold::Otsu];
        thresholds.extend((60..=200).step_by(20).map(Threshold::Value));
        Self {
            thresholds,
            open_radii: vec![0, 1, 2],
            min_areas: vec![20, 50, 100],
            max_areas: vec![Some(5000), None],
        }
    }
}

impl SearchSpace {
    fn validate(&self) -> Result<(), DetectError> {
        if self.thresholds.is_empty() || self.open_radii.is_empty() || self.min_areas.is_empty() || self.max_areas.is_empty()
        {
            return Err(DetectError::InvalidParams("search space grids must be non-empty".into()));
        }
        Ok(())
    }

    /// The parent followed by every valid grid point that differs from it.
    /// Fields outside the grid are inherited from the parent.
    pub fn candidates(&self, parent: &DetectorParams) -> Vec<DetectorParams> {
        let mut out = vec![parent.clone()];
        for &threshold in &self.thresholds {
            for &open_radius in &self.open_radii {
                for &min_area in &self.min_areas {
                    for &max_area in &self.max_areas {
                        let c = DetectorParams {
                            threshold,
                            open_radius,
                            min_area,
                            max_area,
                            ..parent.clone()
                        };
                        if c != *parent && c.validate().is_ok() && !out.contains(&c) {
                            out.push(c);
                        }
                    }
                }
            }
        }
        out
    }
}

/// A corrected tile: pixels (possibly zero-padded), the valid region, and
/// ground truth in tile pixel coordinates.
#[derive(Debug, Clone)]
pub struct TrainingTile {
    pub image: Gray8,
    pub valid_w: u32,
    pub valid_h: u32,
    pub truth: Vec<Polygon>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchEntry {
    pub params: DetectorParams,
    pub f1: f64,
    pub counts: Counts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptOutcome {
    pub selected: DetectorParams,
    pub before: MetricsReport,
    pub after: MetricsReport,
    /// One entry per candidate, parent first.
    pub search_log: Vec<SearchEntry>,
}

/// `2m / (n_gt + n_det)` with `0 / 0` read as a perfect score.
fn f1_cmp(a: &Counts, b: &Counts) -> Ordering {
    let norm = |c: &Counts| match c.f1_ratio() {
        (_, 0) => (1u128, 1u128),
        (n, d) => (u128::from(n), u128::from(d)),
    };
    let (an, ad) = norm(a);
    let (bn, bd) = norm(b);
    (an * bd).cmp(&(bn * ad))
}

fn f1_value(c: &Counts) -> f64 {
    match c.f1_ratio() {
        (_, 0) => 1.0,
        (n, d) => n as f64 / d as f64,
    }
}

fn changes(p: &DetectorParams, parent: &DetectorParams) -> usize {
    usize::from(p.threshold != parent.threshold)
        + usize::from(p.open_radius != parent.open_radius)
        + usize::from(p.min_area != parent.min_area)
        + usize::from(p.max_area != parent.max_area)
}

fn lex_key(p: &DetectorParams) -> (Threshold, u32, u64, (u8, u64)) {
    (
        p.threshold,
        p.open_radius,
        p.min_area,
        p.max_area.map_or((1, 0), |m| (0, m)),
    )
}

/// Traced outlines of every component for one tile and one
/// `(threshold, open_radius)` pair, with pixel areas.
struct TracedTile {
    outlines: Vec<(u64, Option<Polygon>)>,
}

fn trace_tile(tile: &TrainingTile, threshold: Threshold, params: &DetectorParams) -> TracedTile {
    let labeling = detect::components(
        &tile.image,
        tile.valid_w,
        tile.valid_h,
        threshold,
        params.polarity,
        params.open_radius,
    );
    let outlines = labeling
        .components
        .iter()
        .map(|c| {
            let ring = trace::trace_outline(&labeling, c.label);
            (c.area, detect::simplify::simplify_polygon(ring, params.simplify_epsilon))
        })
        .collect();
    TracedTile { outlines }
}

fn score(traced: &TracedTile, truth: &[Polygon], params: &DetectorParams) -> Counts {
    let det: Vec<(usize, &Polygon)> = traced
        .outlines
        .iter()
        .filter(|(area, _)| params.area_in_bounds(*area))
        .filter_map(|(_, p)| p.as_ref())
        .enumerate()
        .collect();
    let gt: Vec<(usize, &Polygon)> = truth.iter().enumerate().collect();
    match_detections(&gt, &det, DEFAULT_IOU_THRESHOLD).counts()
}

/// Micro-averaged counts of `params` over `tiles`.
pub fn evaluate_params(params: &DetectorParams, tiles: &[TrainingTile]) -> Counts {
    tiles
        .par_iter()
        .map(|t| score(&trace_tile(t, params.threshold, params), &t.truth, params))
        .collect::<Vec<_>>()
        .into_iter()
        .sum()
}

pub fn adapt(parent: &DetectorParams, tiles: &[TrainingTile], space: &SearchSpace) -> Result<AdaptOutcome, DetectError> {
    if tiles.is_empty() {
        return Err(DetectError::EmptyTrainingSet);
    }
    parent.validate()?;
    space.validate()?;
    let candidates = space.candidates(parent);

    // Labeling and tracing depend only on (threshold, open_radius); area
    // bounds are applied afterwards.
    let mut groups: BTreeMap<(Threshold, u32), Vec<usize>> = BTreeMap::new();
    for (i, c) in candidates.iter().enumerate() {
        groups.entry((c.threshold, c.open_radius)).or_default().push(i);
    }
    let groups: Vec<_> = groups.into_iter().collect();
    let scored: Vec<Vec<(usize, Counts)>> = groups
        .par_iter()
        .map(|((threshold, _), members)| {
            let rep = &candidates[members[0]];
            let mut totals = vec![Counts::default(); members.len()];
            for tile in tiles {
                let traced = trace_tile(tile, *threshold, rep);
                for (slot, &m) in members.iter().enumerate() {
                    totals[slot] = totals[slot] + score(&traced, &tile.truth, &candidates[m]);
                }
            }
            members.iter().copied().zip(totals).collect()
        })
        .collect();
    let mut counts = vec![Counts::default(); candidates.len()];
    for (i, c) in scored.into_iter().flatten() {
        counts[i] = c;
    }

    let best = (0..candidates.len())
        .min_by(|&a, &b| {
            f1_cmp(&counts[b], &counts[a])
                .then_with(|| changes(&candidates[a], parent).cmp(&changes(&candidates[b], parent)))
                .then_with(|| lex_key(&candidates[a]).cmp(&lex_key(&candidates[b])))
        })
        .expect("parent is always a candidate");

    let search_log = candidates
        .iter()
        .zip(&counts)
        .map(|(p, c)| SearchEntry {
            params: p.clone(),
            f1: f1_value(c),
            counts: *c,
        })
        .collect();
    Ok(AdaptOutcome {
        selected: candidates[best].clone(),
        before: MetricsReport::from_counts(counts[0]),
        after: MetricsReport::from_counts(counts[best]),
        search_log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::Polarity;

    fn squares_tile(intensity: u8) -> TrainingTile {
        let mut image = Gray8::new(300, 300);
        let mut truth = Vec::new();
        for (x0, y0) in [(20u32, 20u32), (100, 40), (200, 200), (50, 230)] {
            for y in y0..y0 + 12 {
                for x in x0..x0 + 12 {
                    image.set(x, y, intensity);
                }
            }
            truth.push(Polygon::rect(f64::from(x0), f64::from(y0), f64::from(x0 + 12), f64::from(y0 + 12)));
        }
        TrainingTile {
            image,
            valid_w: 300,
            valid_h: 300,
            truth,
        }
    }

    fn parent() -> DetectorParams {
        DetectorParams {
            threshold: Threshold::Value(128),
            polarity: Polarity::BrightObjects,
            open_radius: 0,
            min_area: 50,
            max_area: Some(5000),
            simplify_epsilon: 0.5,
        }
    }

    #[test]
    fn default_grid_size() {
        let space = SearchSpace::default();
        assert_eq!(space.thresholds.len(), 9);
        // parent (threshold 128) is off-grid: 9 * 3 * 3 * 2 + 1
        assert_eq!(space.candidates(&parent()).len(), 163);
        assert_eq!(space.candidates(&DetectorParams::generic_structures()).len(), 163);
    }

    #[test]
    fn optimal_parent_is_kept() {
        let tiles = vec![squares_tile(200)];
        let out = adapt(&parent(), &tiles, &SearchSpace::default()).unwrap();
        assert_eq!(out.selected, parent());
        assert_eq!(out.before.f1, Some(1.0));
        assert_eq!(out.after, out.before);
    }

    #[test]
    fn dim_squares_select_lower_threshold() {
        let tiles = vec![squares_tile(100)];
        let space = SearchSpace {
            thresholds: vec![Threshold::Value(90), Threshold::Value(128)],
            open_radii: vec![0],
            min_areas: vec![50],
            max_areas: vec![Some(5000)],
        };
        let out = adapt(&parent(), &tiles, &space).unwrap();
        assert_eq!(out.before.f1, Some(0.0));
        assert_eq!(out.selected.threshold, Threshold::Value(90));
        assert_eq!(out.after.f1, Some(1.0));
        assert_eq!(out.search_log.len(), 2);
    }

    #[test]
    fn brute_force_oracle_agrees() {
        let tiles = vec![squares_tile(100), squares_tile(170)];
        let space = SearchSpace {
            thresholds: vec![Threshold::Otsu, Threshold::Value(60), Threshold::Value(90), Threshold::Value(150)],
            open_radii: vec![0, 1],
            min_areas: vec![20, 50, 200],
            max_areas: vec![Some(5000), None],
        };
        let out = adapt(&parent(), &tiles, &space).unwrap();
        for entry in &out.search_log {
            assert_eq!(entry.counts, evaluate_params(&entry.params, &tiles));
            assert!(entry.f1 <= out.after.f1.unwrap());
        }
        assert_eq!(out.after.f1, Some(1.0));
        // among perfect candidates only the threshold needs to change
        assert_eq!(changes(&out.selected, &parent()), 1);
    }

    #[test]
    fn empty_training_set() {
        assert_eq!(
            adapt(&parent(), &[], &SearchSpace::default()).unwrap_err(),
            DetectError::EmptyTrainingSet
        );
    }
}
