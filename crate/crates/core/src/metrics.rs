//! Object-level and pixel-level evaluation.
//!
//! * completion rate: object recall, `n_matched / n_gt`
//! * user accuracy: object precision, `n_matched / n_det`
//! * F1: `2 n_matched / (n_gt + n_det)`, the harmonic mean of the two
//! * pixel accuracy: `(TP + TN) / total` over boolean masks
//!
//! Detections are matched to ground truth one-to-one, greedily by
//! descending IoU among pairs at or above the threshold.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, Polygon};
use crate::mask::BinaryMask;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("mask shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((u32, u32), (u32, u32)),
    #[error("invalid geometry: {0}")]
    InvalidGeometry(#[from] GeometryError),
}

/// Intersection over union of two valid simple polygons.
pub fn polygon_iou(a: &Polygon, b: &Polygon) -> Result<f64, MetricsError> {
    a.validate()?;
    b.validate()?;
    Ok(iou_unchecked(a, b))
}

/// IoU without validating the inputs. Symmetric bit-for-bit: the pair is put
/// into a canonical order before clipping.
pub fn iou_unchecked(a: &Polygon, b: &Polygon) -> f64 {
    if a.ring() == b.ring() {
        return 1.0;
    }
    let (a, b) = if ring_cmp(a, b) == Ordering::Greater { (b, a) } else { (a, b) };
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

fn ring_cmp(a: &Polygon, b: &Polygon) -> Ordering {
    let fa = a.ring().iter().flatten();
    let fb = b.ring().iter().flatten();
    for (x, y) in fa.zip(fb) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            other => return other,
        }
    }
    a.ring().len().cmp(&b.ring().len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchPair<Id> {
    pub gt: Id,
    pub det: Id,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult<Id> {
    pub pairs: Vec<MatchPair<Id>>,
    pub unmatched_gt: Vec<Id>,
    pub unmatched_det: Vec<Id>,
    pub iou_threshold: f64,
}

impl<Id> MatchResult<Id> {
    pub fn counts(&self) -> Counts {
        Counts {
            n_gt: self.pairs.len() + self.unmatched_gt.len(),
            n_det: self.pairs.len() + self.unmatched_det.len(),
            n_matched: self.pairs.len(),
        }
    }
}

/// Greedy one-to-one matching by descending IoU; ties go to the
/// lexicographically smallest `(gt id, det id)`.
pub fn match_detections<Id>(gt: &[(Id, &Polygon)], det: &[(Id, &Polygon)], iou_threshold: f64) -> MatchResult<Id>
where
    Id: Ord + Copy,
{
    let det_boxes: Vec<_> = det.iter().map(|(_, p)| p.bbox()).collect();
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (gi, (_, g)) in gt.iter().enumerate() {
        let gb = g.bbox();
        for (di, (_, d)) in det.iter().enumerate() {
            if !gb.overlaps(&det_boxes[di]) {
                continue;
            }
            let iou = iou_unchecked(g, d);
            if iou >= iou_threshold && iou > 0.0 {
                candidates.push((iou, gi, di));
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then_with(|| gt[a.1].0.cmp(&gt[b.1].0))
            .then_with(|| det[a.2].0.cmp(&det[b.2].0))
    });
    let mut gt_used = vec![false; gt.len()];
    let mut det_used = vec![false; det.len()];
    let mut pairs = Vec::new();
    for (iou, gi, di) in candidates {
        if gt_used[gi] || det_used[di] {
            continue;
        }
        gt_used[gi] = true;
        det_used[di] = true;
        pairs.push(MatchPair { gt: gt[gi].0, det: det[di].0, iou });
    }
    let mut unmatched_gt: Vec<Id> = gt.iter().zip(&gt_used).filter(|(_, u)| !**u).map(|(g, _)| g.0).collect();
    let mut unmatched_det: Vec<Id> = det.iter().zip(&det_used).filter(|(_, u)| !**u).map(|(d, _)| d.0).collect();
    unmatched_gt.sort();
    unmatched_det.sort();
    MatchResult {
        pairs,
        unmatched_gt,
        unmatched_det,
        iou_threshold,
    }
}

/// Match counts; addable for micro-averaging over tiles.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub n_gt: usize,
    pub n_det: usize,
    pub n_matched: usize,
}

impl std::ops::Add for Counts {
    type Output = Counts;

    fn add(self, o: Counts) -> Counts {
        Counts {
            n_gt: self.n_gt + o.n_gt,
            n_det: self.n_det + o.n_det,
            n_matched: self.n_matched + o.n_matched,
        }
    }
}

impl std::iter::Sum for Counts {
    fn sum<I: Iterator<Item = Counts>>(iter: I) -> Counts {
        iter.fold(Counts::default(), |a, b| a + b)
    }
}

impl Counts {
    /// F1 as an exact fraction `(2 n_matched, n_gt + n_det)`.
    pub fn f1_ratio(&self) -> (u64, u64) {
        (2 * self.n_matched as u64, (self.n_gt + self.n_det) as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    #[default]
    Objects,
    Pixels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub completion_rate: Option<f64>,
    pub user_accuracy: Option<f64>,
    pub f1: Option<f64>,
    pub pixel_accuracy: Option<f64>,
    pub counts: Counts,
}

impl MetricsReport {
    pub fn from_counts(counts: Counts) -> Self {
        let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
        Self {
            completion_rate: ratio(counts.n_matched, counts.n_gt),
            user_accuracy: ratio(counts.n_matched, counts.n_det),
            f1: ratio(2 * counts.n_matched, counts.n_gt + counts.n_det),
            pixel_accuracy: None,
            counts,
        }
    }
}

/// Inputs to [`compute_report`].
pub enum EvalData<'a, Id> {
    Objects {
        gt: &'a [(Id, &'a Polygon)],
        det: &'a [(Id, &'a Polygon)],
        iou_threshold: f64,
    },
    Pixels {
        gt: &'a BinaryMask,
        det: &'a BinaryMask,
    },
}

pub fn compute_report<Id: Ord + Copy>(data: EvalData<'_, Id>) -> Result<MetricsReport, MetricsError> {
    match data {
        EvalData::Objects { gt, det, iou_threshold } => {
            Ok(MetricsReport::from_counts(match_detections(gt, det, iou_threshold).counts()))
        }
        EvalData::Pixels { gt, det } => pixel_report(gt, det),
    }
}

pub fn pixel_report(gt: &BinaryMask, det: &BinaryMask) -> Result<MetricsReport, MetricsError> {
    if gt.shape() != det.shape() {
        return Err(MetricsError::ShapeMismatch(gt.shape(), det.shape()));
    }
    let mut tp = 0usize;
    let mut tn = 0usize;
    for (&g, &d) in gt.data().iter().zip(det.data()) {
        match (g, d) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            _ => {}
        }
    }
    let total = gt.data().len();
    Ok(MetricsReport {
        completion_rate: None,
        user_accuracy: None,
        f1: None,
        pixel_accuracy: (total > 0).then(|| (tp + tn) as f64 / total as f64),
        counts: Counts {
            n_gt: gt.count(),
            n_det: det.count(),
            n_matched: tp,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn unit(x: f64, y: f64) -> Polygon {
        Polygon::rect(x, y, x + 1.0, y + 1.0)
    }

    #[test]
    fn iou_examples() {
        assert_eq!(polygon_iou(&unit(0.0, 0.0), &unit(0.0, 0.0)).unwrap(), 1.0);
        assert_eq!(polygon_iou(&unit(0.0, 0.0), &unit(5.0, 5.0)).unwrap(), 0.0);
        let iou = polygon_iou(&unit(0.0, 0.0), &unit(0.5, 0.0)).unwrap();
        assert_abs_diff_eq!(iou, 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn iou_rejects_invalid() {
        let bad = Polygon::from_ring_unchecked(vec![[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]);
        assert!(matches!(polygon_iou(&bad, &unit(0.0, 0.0)), Err(MetricsError::InvalidGeometry(_))));
    }

    #[test]
    fn iou_is_symmetric() {
        let a = Polygon::rect(0.1, 0.2, 3.3, 2.9);
        let b = Polygon::new(vec![[1.0, 1.0], [4.0, 0.5], [3.0, 3.5], [1.0, 1.0]]).unwrap();
        assert_eq!(iou_unchecked(&a, &b), iou_unchecked(&b, &a));
    }

    #[test]
    fn empty_truth_leaves_all_unmatched() {
        let d = [unit(0.0, 0.0), unit(3.0, 0.0)];
        let det: Vec<(u32, &Polygon)> = d.iter().enumerate().map(|(i, p)| (i as u32, p)).collect();
        let m = match_detections::<u32>(&[], &det, 0.5);
        assert!(m.pairs.is_empty());
        assert_eq!(m.unmatched_det, vec![0, 1]);
    }

    #[test]
    fn two_of_three_matched() {
        let g = [unit(0.0, 0.0), unit(3.0, 0.0), unit(6.0, 0.0)];
        let d = [unit(0.0, 0.0), unit(3.0, 0.0)];
        let gt: Vec<(u32, &Polygon)> = g.iter().enumerate().map(|(i, p)| (i as u32, p)).collect();
        let det: Vec<(u32, &Polygon)> = d.iter().enumerate().map(|(i, p)| (i as u32, p)).collect();
        let m = match_detections(&gt, &det, 0.5);
        assert_eq!(m.pairs.len(), 2);
        let r = MetricsReport::from_counts(m.counts());
        assert_abs_diff_eq!(r.completion_rate.unwrap(), 2.0 / 3.0);
        assert_eq!(r.user_accuracy, Some(1.0));
        assert_abs_diff_eq!(r.f1.unwrap(), 0.8, epsilon = 1e-12);
    }

    #[test]
    fn best_of_two_detections_wins() {
        // gt is 10x10; det A covers 9x10 (IoU .9), det B covers 10x6 (IoU .6)
        let g = Polygon::rect(0.0, 0.0, 10.0, 10.0);
        let a = Polygon::rect(0.0, 0.0, 9.0, 10.0);
        let b = Polygon::rect(0.0, 0.0, 10.0, 6.0);
        let m = match_detections(&[(1u32, &g)], &[(1u32, &b), (2u32, &a)], 0.5);
        assert_eq!(m.pairs.len(), 1);
        assert_eq!(m.pairs[0].det, 2);
        assert_abs_diff_eq!(m.pairs[0].iou, 0.9, epsilon = 1e-9);
        assert_eq!(m.unmatched_det, vec![1]);
    }

    #[test]
    fn ties_break_on_ids() {
        let g = unit(0.0, 0.0);
        let m = match_detections(&[(5u32, &g)], &[(9u32, &g), (3u32, &g)], 0.5);
        assert_eq!(m.pairs[0].det, 3);
    }

    #[test]
    fn perfect_report() {
        let g = [unit(0.0, 0.0), unit(2.0, 2.0)];
        let gt: Vec<(u32, &Polygon)> = g.iter().enumerate().map(|(i, p)| (i as u32, p)).collect();
        let r = compute_report(EvalData::Objects { gt: &gt, det: &gt, iou_threshold: 0.5 }).unwrap();
        assert_eq!((r.completion_rate, r.user_accuracy, r.f1), (Some(1.0), Some(1.0), Some(1.0)));
    }

    #[test]
    fn no_detections_has_no_user_accuracy() {
        let r = MetricsReport::from_counts(Counts { n_gt: 4, n_det: 0, n_matched: 0 });
        assert_eq!(r.user_accuracy, None);
        assert_eq!(r.completion_rate, Some(0.0));
        assert_eq!(r.f1, Some(0.0));
    }

    #[test]
    fn pixel_modes() {
        let gt = BinaryMask::new(4, 3);
        let det = BinaryMask::new(4, 3);
        let r = compute_report::<u32>(EvalData::Pixels { gt: &gt, det: &det }).unwrap();
        assert_eq!(r.pixel_accuracy, Some(1.0));
        let other = BinaryMask::new(3, 4);
        assert!(matches!(pixel_report(&gt, &other), Err(MetricsError::ShapeMismatch(..))));
    }
}
