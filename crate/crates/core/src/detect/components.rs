//! 8-connected component labeling (two-pass, union-find).

use crate::mask::BinaryMask;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    pub label: u32,
    pub area: u64,
    /// First pixel in raster order `(x, y)`.
    pub first: (u32, u32),
    /// Inclusive pixel bounds `(x0, y0, x1, y1)`.
    pub bbox: (u32, u32, u32, u32),
}

/// Per-pixel labels (0 is background, components are `1..=n` numbered in
/// order of their first pixel) and component statistics.
#[derive(Debug, Clone)]
pub struct Labeling {
    pub width: u32,
    pub height: u32,
    pub labels: Vec<u32>,
    pub components: Vec<Component>,
}

impl Labeling {
    #[inline]
    pub fn label_at(&self, x: i64, y: i64) -> u32 {
        if x < 0 || y < 0 || x >= i64::from(self.width) || y >= i64::from(self.height) {
            0
        } else {
            self.labels[y as usize * self.width as usize + x as usize]
        }
    }

    pub fn component(&self, label: u32) -> &Component {
        &self.components[label as usize - 1]
    }
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let p = parent[x as usize];
        parent[x as usize] = parent[p as usize];
        x = p;
    }
    x
}

fn union(parent: &mut [u32], a: u32, b: u32) {
    let ra = find(parent, a);
    let rb = find(parent, b);
    if ra != rb {
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi as usize] = lo;
    }
}

pub fn label_components(mask: &BinaryMask) -> Labeling {
    let w = mask.width() as usize;
    let h = mask.height() as usize;
    let mut provisional = vec![0u32; w * h];
    let mut parent: Vec<u32> = vec![0];
    for y in 0..h {
        for x in 0..w {
            if !mask.data()[y * w + x] {
                continue;
            }
            let mut neighbours = [0u32; 4];
            let mut n = 0;
            if x > 0 && provisional[y * w + x - 1] != 0 {
                neighbours[n] = provisional[y * w + x - 1];
                n += 1;
            }
            if y > 0 {
                let up = (y - 1) * w;
                if x > 0 && provisional[up + x - 1] != 0 {
                    neighbours[n] = provisional[up + x - 1];
                    n += 1;
                }
                if provisional[up + x] != 0 {
                    neighbours[n] = provisional[up + x];
                    n += 1;
                }
                if x + 1 < w && provisional[up + x + 1] != 0 {
                    neighbours[n] = provisional[up + x + 1];
                    n += 1;
                }
            }
            let label = if n == 0 {
                let l = parent.len() as u32;
                parent.push(l);
                l
            } else {
                let l = neighbours[..n].iter().copied().min().unwrap();
                for &other in &neighbours[..n] {
                    union(&mut parent, l, other);
                }
                l
            };
            provisional[y * w + x] = label;
        }
    }

    let mut final_of_root = vec![0u32; parent.len()];
    let mut components: Vec<Component> = Vec::new();
    let mut labels = provisional;
    for y in 0..h {
        for x in 0..w {
            let p = labels[y * w + x];
            if p == 0 {
                continue;
            }
            let root = find(&mut parent, p);
            let mut label = final_of_root[root as usize];
            if label == 0 {
                components.push(Component {
                    label: components.len() as u32 + 1,
                    area: 0,
                    first: (x as u32, y as u32),
                    bbox: (x as u32, y as u32, x as u32, y as u32),
                });
                label = components.len() as u32;
                final_of_root[root as usize] = label;
            }
            labels[y * w + x] = label;
            let c = &mut components[label as usize - 1];
            c.area += 1;
            c.bbox.0 = c.bbox.0.min(x as u32);
            c.bbox.1 = c.bbox.1.min(y as u32);
            c.bbox.2 = c.bbox.2.max(x as u32);
            c.bbox.3 = c.bbox.3.max(y as u32);
        }
    }
    Labeling {
        width: mask.width(),
        height: mask.height(),
        labels,
        components,
    }
}
