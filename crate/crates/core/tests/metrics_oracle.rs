use geoloop_core::metrics::{iou_unchecked, match_detections, polygon_iou, MetricsReport};
use geoloop_core::Polygon;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Star-shaped polygon around `(cx, cy)`: sorted angles with random radii.
fn star(rng: &mut ChaCha8Rng, cx: f64, cy: f64, r: f64) -> Polygon {
    let n = rng.random_range(3..9);
    let mut angles: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    angles.sort_by(f64::total_cmp);
    angles.dedup_by(|a, b| (*a - *b).abs() < 0.05);
    if angles.len() < 3 {
        return Polygon::rect(cx - r, cy - r, cx + r, cy + r);
    }
    let ring: Vec<[f64; 2]> = angles
        .iter()
        .map(|a| {
            let rr = rng.random_range(0.4 * r..r);
            [cx + rr * a.cos(), cy + rr * a.sin()]
        })
        .collect();
    match Polygon::new({
        let mut v = ring.clone();
        v.push(ring[0]);
        v
    }) {
        Ok(p) => p,
        Err(_) => Polygon::rect(cx - r, cy - r, cx + r, cy + r),
    }
}

/// Maximum-cardinality bipartite matching (Kuhn's augmenting paths).
fn max_matching(adj: &[Vec<usize>], n_right: usize) -> usize {
    fn augment(u: usize, adj: &[Vec<usize>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for &v in &adj[u] {
            if seen[v] {
                continue;
            }
            seen[v] = true;
            if owner[v].is_none() || augment(owner[v].unwrap(), adj, seen, owner) {
                owner[v] = Some(u);
                return true;
            }
        }
        false
    }
    let mut owner = vec![None; n_right];
    (0..adj.len())
        .filter(|&u| augment(u, adj, &mut vec![false; n_right], &mut owner))
        .count()
}

/// Area fraction estimate of `a ∩ b` over `a ∪ b` by sampling a grid over
/// the joint bounding box with even-odd point containment.
fn sampled_iou(a: &Polygon, b: &Polygon, n: usize) -> f64 {
    let (ba, bb) = (a.bbox(), b.bbox());
    let (x0, y0) = (ba.min_x.min(bb.min_x), ba.min_y.min(bb.min_y));
    let (x1, y1) = (ba.max_x.max(bb.max_x), ba.max_y.max(bb.max_y));
    let (mut inter, mut union) = (0u64, 0u64);
    for i in 0..n {
        for j in 0..n {
            let x = x0 + (i as f64 + 0.5) / n as f64 * (x1 - x0);
            let y = y0 + (j as f64 + 0.5) / n as f64 * (y1 - y0);
            let (ia, ib) = (a.contains_point(x, y), b.contains_point(x, y));
            inter += u64::from(ia && ib);
            union += u64::from(ia || ib);
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[test]
fn greedy_never_beats_optimal_and_usually_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let (mut ties, total) = (0, 500);
    for _ in 0..total {
        let ng = rng.random_range(0..=8);
        let nd = rng.random_range(0..=8);
        let gt: Vec<Polygon> = (0..ng)
            .map(|_| {
                let (x, y) = (rng.random_range(0.0..30.0), rng.random_range(0.0..30.0));
                star(&mut rng, x, y, 4.0)
            })
            .collect();
        let det: Vec<Polygon> = (0..nd)
            .map(|i| {
                if i < ng && rng.random_bool(0.7) {
                    let c = gt[i].centroid();
                    let (dx, dy) = (rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
                    star(&mut rng, c[0] + dx, c[1] + dy, 4.0)
                } else {
                    let (x, y) = (rng.random_range(0.0..30.0), rng.random_range(0.0..30.0));
                    star(&mut rng, x, y, 4.0)
                }
            })
            .collect();
        let g: Vec<(usize, &Polygon)> = gt.iter().enumerate().collect();
        let d: Vec<(usize, &Polygon)> = det.iter().enumerate().collect();
        let greedy = match_detections(&g, &d, 0.5);
        let adj: Vec<Vec<usize>> = gt
            .iter()
            .map(|a| (0..det.len()).filter(|&j| iou_unchecked(a, &det[j]) >= 0.5).collect())
            .collect();
        let optimal = max_matching(&adj, det.len());
        assert!(greedy.pairs.len() <= optimal);
        ties += usize::from(greedy.pairs.len() == optimal);
        // one-to-one and above threshold
        let mut gs: Vec<_> = greedy.pairs.iter().map(|p| p.gt).collect();
        let mut ds: Vec<_> = greedy.pairs.iter().map(|p| p.det).collect();
        gs.sort();
        ds.sort();
        gs.dedup();
        ds.dedup();
        assert_eq!(gs.len(), greedy.pairs.len());
        assert_eq!(ds.len(), greedy.pairs.len());
        assert!(greedy.pairs.iter().all(|p| p.iou >= 0.5));
    }
    println!("greedy optimal in {ties}/{total} instances");
    assert!(ties as f64 >= 0.95 * total as f64);
}

#[test]
fn iou_agrees_with_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let a = star(&mut rng, 10.0, 10.0, 5.0);
        let (dx, dy) = (rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0));
        let b = star(&mut rng, 10.0 + dx, 10.0 + dy, 5.0);
        let exact = polygon_iou(&a, &b).unwrap();
        let est = sampled_iou(&a, &b, 500);
        assert!((exact - est).abs() < 1e-2, "exact {exact} sampled {est}");
    }
}

#[test]
fn analytic_iou_examples() {
    let a = Polygon::rect(0.0, 0.0, 1.0, 1.0);
    assert_eq!(polygon_iou(&a, &a).unwrap(), 1.0);
    assert_eq!(polygon_iou(&a, &Polygon::rect(3.0, 0.0, 4.0, 1.0)).unwrap(), 0.0);
    let b = Polygon::rect(0.5, 0.0, 1.5, 1.0);
    assert!((polygon_iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn two_detections_one_truth() {
    let gt = Polygon::rect(0.0, 0.0, 10.0, 10.0);
    // IoU 0.9 and 0.6 against the truth square
    let d9 = Polygon::rect(0.0, 0.0, 10.0, 9.0);
    let d6 = Polygon::rect(0.0, 0.0, 10.0, 6.0);
    let r = match_detections(&[(1, &gt)], &[(1, &d6), (2, &d9)], 0.5);
    assert_eq!(r.pairs.len(), 1);
    assert_eq!(r.pairs[0].det, 2);
    assert_eq!(r.unmatched_det, vec![1]);
}

proptest! {
    #[test]
    fn iou_is_symmetric(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = star(&mut rng, 5.0, 5.0, 4.0);
        let (cx, cy) = (rng.random_range(2.0..8.0), rng.random_range(2.0..8.0));
        let b = star(&mut rng, cx, cy, 4.0);
        prop_assert_eq!(iou_unchecked(&a, &b).to_bits(), iou_unchecked(&b, &a).to_bits());
    }

    #[test]
    fn report_is_scale_invariant(seed in any::<u64>(), s in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt: Vec<Polygon> = (0..5).map(|i| star(&mut rng, 12.0 * i as f64, 0.0, 4.0)).collect();
        let det: Vec<Polygon> = (0..5).map(|i| star(&mut rng, 12.0 * i as f64 + 1.0, 0.5, 4.0)).collect();
        let report = |gt: &[Polygon], det: &[Polygon]| {
            let g: Vec<_> = gt.iter().enumerate().collect();
            let d: Vec<_> = det.iter().enumerate().collect();
            MetricsReport::from_counts(match_detections(&g, &d, 0.5).counts())
        };
        let scaled = |ps: &[Polygon]| ps.iter().map(|p| p.scale(s)).collect::<Vec<_>>();
        let base = report(&gt, &det);
        let r = report(&scaled(&gt), &scaled(&det));
        // IoU is scale-free up to rounding; compare counts away from the threshold
        let near = gt.iter().zip(&det).any(|(a, b)| (iou_unchecked(a, b) - 0.5).abs() < 1e-9);
        prop_assume!(!near);
        prop_assert_eq!(base, r);
    }

    #[test]
    fn matching_unmatched_truth_never_lowers_completion(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt: Vec<Polygon> = (0..6).map(|i| star(&mut rng, 12.0 * i as f64, 0.0, 4.0)).collect();
        let mut det: Vec<Polygon> = (0..4).map(|i| star(&mut rng, 12.0 * i as f64 + 0.5, 0.0, 4.0)).collect();
        let completion = |det: &[Polygon]| {
            let g: Vec<_> = gt.iter().enumerate().collect();
            let d: Vec<_> = det.iter().enumerate().collect();
            let r = match_detections(&g, &d, 0.5);
            (r.counts().n_matched as f64 / gt.len() as f64, r.unmatched_gt)
        };
        let (before, unmatched) = completion(&det);
        if let Some(&u) = unmatched.first() {
            det.push(gt[u].clone());
            let (after, _) = completion(&det);
            prop_assert!(after >= before);
        }
    }
}
