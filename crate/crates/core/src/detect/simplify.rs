//! Douglas-Peucker simplification of closed rings.

use crate::geometry::{Point, Polygon};

fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return ((p[0] - a[0]).powi(2) + (p[1] - a[1]).powi(2)).sqrt();
    }
    let t = (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0);
    let (cx, cy) = (a[0] + t * dx, a[1] + t * dy);
    ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt()
}

/// Marks points of `pts[lo..=hi]` to keep.
fn dp(pts: &[Point], lo: usize, hi: usize, eps: f64, keep: &mut [bool]) {
    let mut stack = vec![(lo, hi)];
    while let Some((lo, hi)) = stack.pop() {
        if hi <= lo + 1 {
            continue;
        }
        let (mut best, mut best_d) = (lo, -1.0);
        for (i, &p) in pts.iter().enumerate().take(hi).skip(lo + 1) {
            let d = segment_distance(p, pts[lo], pts[hi]);
            if d > best_d {
                best = i;
                best_d = d;
            }
        }
        if best_d > eps {
            keep[best] = true;
            stack.push((lo, best));
            stack.push((best, hi));
        }
    }
}

/// Simplifies a closed ring with tolerance `eps`. The ring is split at the
/// vertex farthest from its first vertex and both halves are simplified.
/// Returns the closed result, which may have fewer than four points.
pub fn douglas_peucker_ring(ring: &[Point], eps: f64) -> Vec<Point> {
    let n = ring.len().saturating_sub(1);
    if n < 4 || eps <= 0.0 {
        return ring.to_vec();
    }
    let verts = &ring[..n];
    let p0 = verts[0];
    let far = (1..n)
        .max_by(|&a, &b| {
            let da = (verts[a][0] - p0[0]).powi(2) + (verts[a][1] - p0[1]).powi(2);
            let db = (verts[b][0] - p0[0]).powi(2) + (verts[b][1] - p0[1]).powi(2);
            da.total_cmp(&db).then(b.cmp(&a))
        })
        .unwrap();
    let mut keep = vec![false; n + 1];
    keep[0] = true;
    keep[far] = true;
    keep[n] = true;
    dp(ring, 0, far, eps, &mut keep);
    dp(ring, far, n, eps, &mut keep);
    ring.iter().zip(&keep).filter(|(_, &k)| k).map(|(&p, _)| p).collect()
}

/// Simplifies an outline, halving the tolerance until the result is a valid
/// polygon and falling back to the input.
pub fn simplify_polygon(ring: Vec<Point>, eps: f64) -> Option<Polygon> {
    let mut e = eps;
    for _ in 0..6 {
        if e <= 0.0 {
            break;
        }
        let simplified = douglas_peucker_ring(&ring, e);
        if simplified.len() == ring.len() {
            break;
        }
        if let Ok(p) = Polygon::new(simplified) {
            return Some(p);
        }
        e /= 2.0;
    }
    Polygon::new(ring).ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn removes_near_collinear_points() {
        let ring = vec![[0.0, 0.0], [5.0, 0.1], [10.0, 0.0], [10.0, 10.0], [0.0, 10.0], [0.0, 0.0]];
        let out = douglas_peucker_ring(&ring, 0.5);
        assert_eq!(out, vec![[0.0, 0.0], [10.0, 0.0], [10.0, 10.0], [0.0, 10.0], [0.0, 0.0]]);
    }

    #[test]
    fn zero_tolerance_is_identity() {
        let ring = vec![[0.0, 0.0], [5.0, 0.1], [10.0, 0.0], [10.0, 10.0], [0.0, 10.0], [0.0, 0.0]];
        assert_eq!(douglas_peucker_ring(&ring, 0.0), ring);
    }

    #[test]
    fn collapse_falls_back_to_valid_polygon() {
        // a thin sliver collapses to a segment at eps = 1
        let ring = vec![[0.0, 0.0], [10.0, 0.0], [10.0, 0.5], [0.0, 0.5], [0.0, 0.0]];
        let p = simplify_polygon(ring.clone(), 1.0).unwrap();
        assert!(p.area() > 0.0);
    }

    #[test]
    fn kept_points_within_tolerance() {
        let ring: Vec<Point> = (0..40)
            .map(|i| {
                let a = i as f64 / 40.0 * std::f64::consts::TAU;
                [10.0 * a.cos(), 10.0 * a.sin()]
            })
            .chain(std::iter::once([10.0, 0.0]))
            .collect();
        let out = douglas_peucker_ring(&ring, 0.5);
        assert!(out.len() < ring.len());
        for p in &ring {
            let d = out
                .windows(2)
                .map(|w| segment_distance(*p, w[0], w[1]))
                .fold(f64::INFINITY, f64::min);
            assert!(d <= 0.5 + 1e-12);
        }
    }
}
