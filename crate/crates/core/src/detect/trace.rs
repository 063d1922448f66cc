//! Outer-boundary tracing on the pixel-corner lattice.
//!
//! Vertex `(vx, vy)` is the top-left corner of pixel `(vx, vy)`. The walk is
//! clockwise in image coordinates (interior on the right) and emits a vertex
//! at every turn, so an axis-aligned component traces to a polygon whose area
//! equals its pixel count. Where two pixels of the component meet only
//! diagonally the walk would touch itself; such saddle vertices are replaced
//! by a short chamfer so rings stay simple.

use super::components::Labeling;
use crate::geometry::Point;

/// Chamfer offset at saddle vertices, in pixels.
pub const SADDLE_OFFSET: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dir {
    E,
    S,
    W,
    N,
}

impl Dir {
    fn delta(self) -> (i64, i64) {
        match self {
            Dir::E => (1, 0),
            Dir::S => (0, 1),
            Dir::W => (-1, 0),
            Dir::N => (0, -1),
        }
    }

    fn left(self) -> Dir {
        match self {
            Dir::E => Dir::N,
            Dir::N => Dir::W,
            Dir::W => Dir::S,
            Dir::S => Dir::E,
        }
    }

    fn right(self) -> Dir {
        match self {
            Dir::E => Dir::S,
            Dir::S => Dir::W,
            Dir::W => Dir::N,
            Dir::N => Dir::E,
        }
    }

    /// Pixels ahead-left and ahead-right of vertex `(vx, vy)`.
    fn ahead(self, vx: i64, vy: i64) -> ((i64, i64), (i64, i64)) {
        match self {
            Dir::E => ((vx, vy - 1), (vx, vy)),
            Dir::S => ((vx, vy), (vx - 1, vy)),
            Dir::W => ((vx - 1, vy), (vx - 1, vy - 1)),
            Dir::N => ((vx - 1, vy - 1), (vx, vy - 1)),
        }
    }
}

/// Closed outer ring (first point repeated) of component `label`.
pub fn trace_outline(labeling: &Labeling, label: u32) -> Vec<Point> {
    let inside = |(x, y): (i64, i64)| labeling.label_at(x, y) == label;
    let (fx, fy) = labeling.component(label).first;
    let start = (i64::from(fx), i64::from(fy));
    let mut ring: Vec<Point> = vec![[start.0 as f64, start.1 as f64]];
    let mut dir = Dir::E;
    let mut v = (start.0 + 1, start.1);
    while v != start {
        let (al, ar) = dir.ahead(v.0, v.1);
        let next = if inside(al) {
            dir.left()
        } else if inside(ar) {
            dir
        } else {
            dir.right()
        };
        if next != dir {
            let (vx, vy) = (v.0 as f64, v.1 as f64);
            if inside(al) && !inside(ar) {
                let (ix, iy) = dir.delta();
                let (ox, oy) = next.delta();
                ring.push([vx - SADDLE_OFFSET * ix as f64, vy - SADDLE_OFFSET * iy as f64]);
                ring.push([vx + SADDLE_OFFSET * ox as f64, vy + SADDLE_OFFSET * oy as f64]);
            } else {
                ring.push([vx, vy]);
            }
        }
        dir = next;
        let (dx, dy) = dir.delta();
        v = (v.0 + dx, v.1 + dy);
    }
    ring.push(ring[0]);
    ring
}

#[cfg(test)]
mod tests {
    use super::super::components::label_components;
    use super::*;
    use crate::geometry::Polygon;
    use crate::mask::BinaryMask;

    fn mask_from(rows: &[&str]) -> BinaryMask {
        let h = rows.len() as u32;
        let w = rows[0].len() as u32;
        BinaryMask::from_fn(w, h, |x, y| rows[y as usize].as_bytes()[x as usize] == b'#')
    }

    #[test]
    fn single_pixel_is_unit_square() {
        let l = label_components(&mask_from(&["...", ".#.", "..."]));
        let ring = trace_outline(&l, 1);
        assert_eq!(ring, vec![[1.0, 1.0], [2.0, 1.0], [2.0, 2.0], [1.0, 2.0], [1.0, 1.0]]);
    }

    #[test]
    fn l_shape_area_matches_pixel_count() {
        let l = label_components(&mask_from(&["#..", "#..", "###"]));
        let p = Polygon::new(trace_outline(&l, 1)).unwrap();
        assert_eq!(p.area(), 5.0);
        assert_eq!(p.vertices().len(), 6);
    }

    #[test]
    fn diagonal_pair_is_chamfered_and_simple() {
        let l = label_components(&mask_from(&["#.", ".#"]));
        let p = Polygon::new(trace_outline(&l, 1)).unwrap();
        // two unit squares plus two bridging triangles of 1/32 each
        assert!((p.area() - (2.0 + 2.0 / 32.0)).abs() < 1e-12);
    }

    #[test]
    fn hole_is_not_traced() {
        let l = label_components(&mask_from(&["###", "#.#", "###"]));
        let p = Polygon::new(trace_outline(&l, 1)).unwrap();
        assert_eq!(p.area(), 9.0);
    }
}
