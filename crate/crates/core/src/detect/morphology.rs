//! Binary erosion, dilation, opening and closing with disk structuring
//! elements `{(dx, dy) : dx^2 + dy^2 <= r^2}`. Neighbours outside the mask
//! are ignored.

use crate::mask::BinaryMask;

/// `(dy, half_width)` rows of the disk of radius `r`.
fn disk_rows(r: u32) -> Vec<(i64, i64)> {
    let r = i64::from(r);
    (-r..=r)
        .map(|dy| {
            let mut hw = 0;
            while (hw + 1) * (hw + 1) + dy * dy <= r * r {
                hw += 1;
            }
            (dy, hw)
        })
        .collect()
}

/// Row-wise prefix counts: `prefix[y * (w + 1) + x]` is the number of set
/// pixels in row `y` left of column `x`.
fn row_prefix(mask: &BinaryMask) -> Vec<u32> {
    let w = mask.width() as usize;
    let h = mask.height() as usize;
    let mut prefix = vec![0u32; (w + 1) * h];
    for (y, row) in mask.data().chunks(w.max(1)).enumerate().take(h) {
        let base = y * (w + 1);
        for (x, &v) in row.iter().enumerate() {
            prefix[base + x + 1] = prefix[base + x] + u32::from(v);
        }
    }
    prefix
}

fn apply(mask: &BinaryMask, r: u32, erode: bool) -> BinaryMask {
    if r == 0 || mask.data().is_empty() {
        return mask.clone();
    }
    let w = mask.width() as i64;
    let h = mask.height() as i64;
    let stride = (w + 1) as usize;
    let prefix = row_prefix(mask);
    let rows = disk_rows(r);
    let mut out = BinaryMask::new(mask.width(), mask.height());
    let data = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            let mut acc = erode;
            for &(dy, hw) in &rows {
                let yy = y + dy;
                if yy < 0 || yy >= h {
                    continue;
                }
                let x0 = (x - hw).max(0);
                let x1 = (x + hw).min(w - 1);
                let base = yy as usize * stride;
                let set = prefix[base + x1 as usize + 1] - prefix[base + x0 as usize];
                if erode {
                    if set as i64 != x1 - x0 + 1 {
                        acc = false;
                        break;
                    }
                } else if set > 0 {
                    acc = true;
                    break;
                }
            }
            data[(y * w + x) as usize] = acc;
        }
    }
    out
}

pub fn erode(mask: &BinaryMask, r: u32) -> BinaryMask {
    apply(mask, r, true)
}

pub fn dilate(mask: &BinaryMask, r: u32) -> BinaryMask {
    apply(mask, r, false)
}

pub fn open(mask: &BinaryMask, r: u32) -> BinaryMask {
    dilate(&erode(mask, r), r)
}

pub fn close(mask: &BinaryMask, r: u32) -> BinaryMask {
    erode(&dilate(mask, r), r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(mask: &BinaryMask, r: u32, erode: bool) -> BinaryMask {
        let r = i64::from(r);
        BinaryMask::from_fn(mask.width(), mask.height(), |x, y| {
            let mut acc = erode;
            for dy in -r..=r {
                for dx in -r..=r {
                    if dx * dx + dy * dy > r * r {
                        continue;
                    }
                    let (xx, yy) = (i64::from(x) + dx, i64::from(y) + dy);
                    if xx < 0 || yy < 0 || xx >= i64::from(mask.width()) || yy >= i64::from(mask.height()) {
                        continue;
                    }
                    let v = mask.get(xx as u32, yy as u32);
                    if erode {
                        acc &= v;
                    } else {
                        acc |= v;
                    }
                }
            }
            acc
        })
    }

    fn pseudo_random_mask(w: u32, h: u32, seed: u64) -> BinaryMask {
        let mut state = seed;
        BinaryMask::from_fn(w, h, |_, _| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            !(state >> 33).is_multiple_of(3)
        })
    }

    #[test]
    fn disk_shapes() {
        assert_eq!(disk_rows(1), vec![(-1, 0), (0, 1), (1, 0)]);
        assert_eq!(disk_rows(2), vec![(-2, 0), (-1, 1), (0, 2), (1, 1), (2, 0)]);
    }

    #[test]
    fn matches_naive_definition() {
        for seed in 0..4 {
            let m = pseudo_random_mask(23, 17, seed);
            for r in 0..4 {
                assert_eq!(erode(&m, r), naive(&m, r, true), "erode r={r}");
                assert_eq!(dilate(&m, r), naive(&m, r, false), "dilate r={r}");
            }
        }
    }

    #[test]
    fn opening_removes_speckle_keeps_blocks() {
        let mut m = BinaryMask::new(20, 20);
        m.set(2, 2, true);
        for y in 8..16 {
            for x in 8..16 {
                m.set(x, y, true);
            }
        }
        let o = open(&m, 1);
        assert!(!o.get(2, 2));
        assert!(o.get(8, 9) && o.get(12, 12));
        // the plus-shaped element trims block corners
        assert!(!o.get(8, 8));
        assert_eq!(o.count(), 64 - 4);
        assert!(o.is_subset_of(&m));
    }

    #[test]
    fn closing_fills_pinholes() {
        let mut m = BinaryMask::from_fn(10, 10, |_, _| true);
        m.set(5, 5, false);
        assert!(close(&m, 1).get(5, 5));
    }
}
