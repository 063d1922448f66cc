//! Simple polygons (one closed exterior ring, no holes) and the handful of
//! planar operations the platform needs.
//!
//! Boolean operations are delegated to the `geo` crate; validity, area,
//! point-in-polygon and rasterization are implemented here.

use geo::{Area, BooleanOps, Intersects};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::PixelWindow;
use crate::mask::BinaryMask;

pub type Point = [f64; 2];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("ring is not closed")]
    NotClosed,
    #[error("ring needs at least 4 points including the closing point, got {0}")]
    TooFewPoints(usize),
    #[error("ring has a non-finite coordinate")]
    NonFinite,
    #[error("ring has a zero-length edge")]
    DegenerateEdge,
    #[error("ring encloses zero area")]
    ZeroArea,
    #[error("ring self-intersects")]
    SelfIntersecting,
}

/// Simple polygon stored as a closed ring (first point repeated last).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Polygon {
    ring: Vec<Point>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bbox {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Bbox {
    pub fn overlaps(&self, other: &Bbox) -> bool {
        self.min_x <= other.max_x
            && other.min_x <= self.max_x
            && self.min_y <= other.max_y
            && other.min_y <= self.max_y
    }
}

impl Polygon {
    /// Validates and wraps a closed ring.
    pub fn new(ring: Vec<Point>) -> Result<Self, GeometryError> {
        let polygon = Self { ring };
        polygon.validate()?;
        Ok(polygon)
    }

    /// Wraps a ring without validation. Closes it if the last point differs
    /// from the first.
    pub fn from_ring_unchecked(mut ring: Vec<Point>) -> Self {
        if ring.len() > 1 && ring.first() != ring.last() {
            let first = ring[0];
            ring.push(first);
        }
        Self { ring }
    }

    /// Axis-aligned rectangle, clockwise in image (y-down) coordinates.
    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            ring: vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1], [x0, y0]],
        }
    }

    pub fn ring(&self) -> &[Point] {
        &self.ring
    }

    /// Ring vertices without the closing point.
    pub fn vertices(&self) -> &[Point] {
        &self.ring[..self.ring.len().saturating_sub(1)]
    }

    pub fn into_ring(self) -> Vec<Point> {
        self.ring
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let ring = &self.ring;
        if ring.len() < 4 {
            return Err(GeometryError::TooFewPoints(ring.len()));
        }
        if ring.iter().flatten().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if ring.first() != ring.last() {
            return Err(GeometryError::NotClosed);
        }
        if ring.windows(2).any(|w| w[0] == w[1]) {
            return Err(GeometryError::DegenerateEdge);
        }
        if !self.is_simple() {
            return Err(GeometryError::SelfIntersecting);
        }
        if self.area() <= 1e-12 {
            return Err(GeometryError::ZeroArea);
        }
        Ok(())
    }

    /// Shoelace signed area. Positive for rings that are clockwise on screen
    /// (y pointing down), i.e. counter-clockwise in y-up coordinates.
    pub fn signed_area(&self) -> f64 {
        let mut acc = 0.0;
        for w in self.ring.windows(2) {
            acc += w[0][0] * w[1][1] - w[1][0] * w[0][1];
        }
        acc / 2.0
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }

    /// Area-weighted centroid; falls back to the vertex mean for degenerate rings.
    pub fn centroid(&self) -> Point {
        let mut cx = 0.0;
        let mut cy = 0.0;
        let mut a2 = 0.0;
        let origin = self.ring.first().copied().unwrap_or([0.0, 0.0]);
        for w in self.ring.windows(2) {
            let (x0, y0) = (w[0][0] - origin[0], w[0][1] - origin[1]);
            let (x1, y1) = (w[1][0] - origin[0], w[1][1] - origin[1]);
            let cross = x0 * y1 - x1 * y0;
            a2 += cross;
            cx += (x0 + x1) * cross;
            cy += (y0 + y1) * cross;
        }
        if a2.abs() < 1e-15 {
            let v = self.vertices();
            let n = v.len().max(1) as f64;
            let sx: f64 = v.iter().map(|p| p[0]).sum();
            let sy: f64 = v.iter().map(|p| p[1]).sum();
            return [sx / n, sy / n];
        }
        [cx / (3.0 * a2) + origin[0], cy / (3.0 * a2) + origin[1]]
    }

    pub fn bbox(&self) -> Bbox {
        let mut b = Bbox {
            min_x: f64::INFINITY,
            min_y: f64::INFINITY,
            max_x: f64::NEG_INFINITY,
            max_y: f64::NEG_INFINITY,
        };
        for p in &self.ring {
            b.min_x = b.min_x.min(p[0]);
            b.min_y = b.min_y.min(p[1]);
            b.max_x = b.max_x.max(p[0]);
            b.max_y = b.max_y.max(p[1]);
        }
        b
    }

    pub fn map(&self, mut f: impl FnMut(Point) -> Point) -> Polygon {
        Polygon {
            ring: self.ring.iter().map(|&p| f(p)).collect(),
        }
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Polygon {
        self.map(|[x, y]| [x + dx, y + dy])
    }

    pub fn scale(&self, s: f64) -> Polygon {
        self.map(|[x, y]| [x * s, y * s])
    }

    pub fn reversed(&self) -> Polygon {
        let mut ring = self.ring.clone();
        ring.reverse();
        Polygon { ring }
    }

    /// True when no two non-adjacent edges touch and no adjacent edges fold back.
    pub fn is_simple(&self) -> bool {
        let n = self.ring.len().saturating_sub(1);
        if n < 3 {
            return false;
        }
        let edges: Vec<(Point, Point)> = (0..n).map(|i| (self.ring[i], self.ring[i + 1])).collect();
        // Adjacent edges must not overlap.
        for i in 0..n {
            let (a, b) = edges[i];
            let c = edges[(i + 1) % n].1;
            if orient(a, b, c) == 0.0 && dot_sub(a, b, c) > 0.0 {
                return false;
            }
        }
        // Sweep over edges sorted by min x to prune pair tests.
        let mut order: Vec<usize> = (0..n).collect();
        let min_x = |e: &(Point, Point)| e.0[0].min(e.1[0]);
        let max_x = |e: &(Point, Point)| e.0[0].max(e.1[0]);
        order.sort_by(|&i, &j| min_x(&edges[i]).total_cmp(&min_x(&edges[j])));
        for (k, &i) in order.iter().enumerate() {
            let right = max_x(&edges[i]);
            for &j in &order[k + 1..] {
                if min_x(&edges[j]) > right {
                    break;
                }
                let adjacent = i.abs_diff(j) == 1 || i.abs_diff(j) == n - 1;
                if adjacent {
                    continue;
                }
                if segments_touch(edges[i].0, edges[i].1, edges[j].0, edges[j].1) {
                    return false;
                }
            }
        }
        true
    }

    /// Even-odd point containment.
    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        let mut inside = false;
        for w in self.ring.windows(2) {
            let (a, b) = (w[0], w[1]);
            if (a[1] > y) != (b[1] > y) {
                let t = (y - a[1]) / (b[1] - a[1]);
                if x < a[0] + t * (b[0] - a[0]) {
                    inside = !inside;
                }
            }
        }
        inside
    }

    pub fn to_geo(&self) -> geo::Polygon<f64> {
        let coords: Vec<geo::Coord<f64>> = self.ring.iter().map(|p| geo::coord! { x: p[0], y: p[1] }).collect();
        geo::Polygon::new(geo::LineString::new(coords), vec![])
    }

    /// Exterior ring of a `geo` polygon, with duplicate and collinear vertices removed.
    pub fn from_geo_exterior(poly: &geo::Polygon<f64>) -> Option<Polygon> {
        let pts: Vec<Point> = poly.exterior().coords().map(|c| [c.x, c.y]).collect();
        let cleaned = clean_ring(&pts);
        let p = Polygon::from_ring_unchecked(cleaned);
        (p.ring.len() >= 4 && p.area() > 1e-12).then_some(p)
    }

    /// Boundary-inclusive intersection test.
    pub fn intersects(&self, other: &Polygon) -> bool {
        self.bbox().overlaps(&other.bbox()) && self.to_geo().intersects(&other.to_geo())
    }

    pub fn intersection_area(&self, other: &Polygon) -> f64 {
        if !self.bbox().overlaps(&other.bbox()) {
            return 0.0;
        }
        self.to_geo().intersection(&other.to_geo()).unsigned_area()
    }

    /// Union of two polygons when it is a single polygon (holes dropped).
    pub fn union(&self, other: &Polygon) -> Option<Polygon> {
        let merged = self.to_geo().union(&other.to_geo());
        if merged.0.len() != 1 {
            return None;
        }
        Polygon::from_geo_exterior(&merged.0[0])
    }

    /// Pieces of the polygon inside a pixel window.
    pub fn clip_to_window(&self, window: PixelWindow) -> Vec<Polygon> {
        let rect = Polygon::rect(
            f64::from(window.x0),
            f64::from(window.y0),
            f64::from(window.x0 + window.w),
            f64::from(window.y0 + window.h),
        );
        let b = self.bbox();
        if b.min_x >= rect.ring[0][0]
            && b.min_y >= rect.ring[0][1]
            && b.max_x <= rect.ring[2][0]
            && b.max_y <= rect.ring[2][1]
        {
            return vec![self.clone()];
        }
        if !b.overlaps(&rect.bbox()) {
            return vec![];
        }
        self.to_geo()
            .intersection(&rect.to_geo())
            .0
            .iter()
            .filter_map(Polygon::from_geo_exterior)
            .collect()
    }

    /// Marks pixels of a `width x height` mask whose centers fall inside.
    pub fn rasterize_into(&self, mask: &mut BinaryMask) {
        let b = self.bbox();
        let (w, h) = (mask.width() as i64, mask.height() as i64);
        let y_start = ((b.min_y - 0.5).ceil() as i64).max(0);
        let y_end = ((b.max_y - 0.5).floor() as i64).min(h - 1);
        let mut xs = Vec::new();
        for py in y_start..=y_end {
            let y = py as f64 + 0.5;
            xs.clear();
            for seg in self.ring.windows(2) {
                let (a, c) = (seg[0], seg[1]);
                if (a[1] > y) != (c[1] > y) {
                    let t = (y - a[1]) / (c[1] - a[1]);
                    xs.push(a[0] + t * (c[0] - a[0]));
                }
            }
            xs.sort_by(f64::total_cmp);
            for pair in xs.chunks(2) {
                if pair.len() < 2 {
                    break;
                }
                // pixel centers px + 0.5 in [x_in, x_out)
                let x0 = ((pair[0] - 0.5).ceil() as i64).max(0);
                let x1 = ((pair[1] - 0.5).ceil() as i64 - 1).min(w - 1);
                for px in x0..=x1 {
                    mask.set(px as u32, py as u32, true);
                }
            }
        }
    }
}

/// Drops repeated and collinear vertices of a (closed or open) ring.
pub fn clean_ring(points: &[Point]) -> Vec<Point> {
    let mut pts: Vec<Point> = Vec::with_capacity(points.len());
    for &p in points {
        if pts.last() != Some(&p) {
            pts.push(p);
        }
    }
    if pts.len() > 1 && pts.first() == pts.last() {
        pts.pop();
    }
    let mut changed = true;
    while changed && pts.len() >= 3 {
        changed = false;
        let n = pts.len();
        let mut keep = Vec::with_capacity(n);
        for i in 0..n {
            let prev = pts[(i + n - 1) % n];
            let next = pts[(i + 1) % n];
            if orient(prev, pts[i], next) == 0.0 {
                changed = true;
                continue;
            }
            keep.push(pts[i]);
        }
        if changed {
            // Remove one collinear vertex per pass at most per neighbourhood
            // by re-running until stable.
            pts = keep;
        }
    }
    if let Some(&first) = pts.first() {
        pts.push(first);
    }
    pts
}

fn orient(a: Point, b: Point, c: Point) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

/// Dot product of (a - b) and (c - b): positive when c folds back towards a.
fn dot_sub(a: Point, b: Point, c: Point) -> f64 {
    (a[0] - b[0]) * (c[0] - b[0]) + (a[1] - b[1]) * (c[1] - b[1])
}

fn on_segment(a: Point, b: Point, p: Point) -> bool {
    p[0] >= a[0].min(b[0]) && p[0] <= a[0].max(b[0]) && p[1] >= a[1].min(b[1]) && p[1] <= a[1].max(b[1])
}

/// Closed-segment intersection, touching included.
fn segments_touch(p1: Point, p2: Point, q1: Point, q2: Point) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(q1, q2, p1))
        || (d2 == 0.0 && on_segment(q1, q2, p2))
        || (d3 == 0.0 && on_segment(p1, p2, q1))
        || (d4 == 0.0 && on_segment(p1, p2, q2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn rect_is_valid() {
        let r = Polygon::rect(0.0, 0.0, 2.0, 3.0);
        r.validate().unwrap();
        assert_eq!(r.area(), 6.0);
        assert_eq!(r.centroid(), [1.0, 1.5]);
    }

    #[test]
    fn collinear_triangle_has_zero_area() {
        let err = Polygon::new(vec![[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [0.0, 0.0]]).unwrap_err();
        assert!(matches!(err, GeometryError::ZeroArea | GeometryError::SelfIntersecting));
    }

    #[test]
    fn rejects_bowtie_and_open_ring() {
        let bowtie = vec![[0.0, 0.0], [2.0, 2.0], [2.0, 0.0], [0.0, 2.0], [0.0, 0.0]];
        assert_eq!(Polygon::new(bowtie).unwrap_err(), GeometryError::SelfIntersecting);
        let open = vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        assert_eq!(Polygon::new(open).unwrap_err(), GeometryError::NotClosed);
        assert_eq!(
            Polygon::new(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 0.0]]).unwrap_err(),
            GeometryError::TooFewPoints(3)
        );
    }

    #[test]
    fn rejects_pinched_ring() {
        // Two squares sharing one vertex: touches itself at (1,1).
        let ring = vec![
            [0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [2.0, 1.0], [2.0, 2.0], [1.0, 2.0], [1.0, 1.0], [0.0, 1.0], [0.0, 0.0],
        ];
        assert_eq!(Polygon::new(ring).unwrap_err(), GeometryError::SelfIntersecting);
    }

    #[test]
    fn union_of_abutting_halves() {
        let a = Polygon::rect(0.0, 0.0, 2.0, 4.0);
        let b = Polygon::rect(2.0, 0.0, 5.0, 4.0);
        assert!(a.intersects(&b));
        assert_eq!(a.intersection_area(&b), 0.0);
        let u = a.union(&b).unwrap();
        assert_abs_diff_eq!(u.area(), 20.0, epsilon = 1e-9);
        assert_eq!(u.vertices().len(), 4);
    }

    #[test]
    fn corner_touch_is_not_a_single_union() {
        let a = Polygon::rect(0.0, 0.0, 1.0, 1.0);
        let b = Polygon::rect(1.0, 1.0, 2.0, 2.0);
        assert!(a.intersects(&b));
        assert!(a.union(&b).is_none());
    }

    #[test]
    fn clip_to_window_splits_area() {
        let p = Polygon::rect(290.0, 10.0, 310.0, 20.0);
        let win = PixelWindow { x0: 0, y0: 0, w: 300, h: 300 };
        let pieces = p.clip_to_window(win);
        assert_eq!(pieces.len(), 1);
        assert_abs_diff_eq!(pieces[0].area(), 100.0, epsilon = 1e-9);
    }

    #[test]
    fn rasterize_rect_counts_pixels() {
        let mut mask = BinaryMask::new(10, 10);
        Polygon::rect(2.0, 3.0, 5.0, 7.0).rasterize_into(&mut mask);
        assert_eq!(mask.count(), 12);
        assert!(mask.get(2, 3) && mask.get(4, 6) && !mask.get(5, 6));
    }

    #[test]
    fn clean_ring_drops_collinear() {
        let ring = vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [2.0, 2.0], [0.0, 2.0], [0.0, 1.0], [0.0, 0.0]];
        let cleaned = clean_ring(&ring);
        assert_eq!(cleaned.len(), 5);
    }
}
