mod common;

use common::{bbox, det, random_image};
use ioucal_core::geometry::iou;
use ioucal_core::model::{rank_order, Detection};
use ioucal_core::suppression::{suppress, suppress_matrix, SuppressionConfig};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn instance(rng: &mut ChaCha8Rng) -> Vec<Detection> {
    let n = rng.gen_range(0..=300);
    let mut dets = random_image(rng, n, 2);
    if rng.gen_bool(0.3) {
        // coarse scores force ties
        for d in &mut dets {
            d.score = (d.score * 10.0).ceil() / 10.0;
        }
    }
    dets.shuffle(rng);
    dets
}

#[test]
fn iterative_and_matrix_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for round in 0..1_000 {
        let dets = instance(&mut rng);
        let hard = SuppressionConfig::hard(rng.gen_range(0.1..0.9));
        assert_eq!(suppress(&dets, &hard).unwrap(), suppress_matrix(&dets, &hard).unwrap(), "round {round}");

        let soft = SuppressionConfig::soft(rng.gen_range(0.01..1.0));
        let a = suppress(&dets, &soft).unwrap();
        let b = suppress_matrix(&dets, &soft).unwrap();
        assert_eq!(a.len(), b.len(), "round {round}");
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.id, y.id);
            assert!((x.score - y.score).abs() <= 1e-12);
        }
    }
}

#[test]
fn three_detection_trace() {
    // IoU(1,2) = 0.6, IoU(1,3) = 0.2, IoU(2,3) = 0.1 along one axis
    let d1 = bbox(0.0, 0.0, 10.0, 10.0);
    let d2 = bbox(2.5, 0.0, 12.5, 10.0);
    let third = |x: f64| bbox(x, 0.0, x + 10.0, 10.0);
    let x3 = 10.0 * (1.0 - 2.0 * 0.2 / 1.2);
    let d3 = third(-x3);
    assert!((iou(&d1, &d2) - 0.6).abs() < 1e-12);
    assert!((iou(&d1, &d3) - 0.2).abs() < 1e-12);
    assert!(iou(&d2, &d3) < 0.5);
    let dets = vec![det(1, 0, 1, d1, 0.9), det(2, 0, 1, d2, 0.8), det(3, 0, 1, d3, 0.7)];
    let kept = suppress(&dets, &SuppressionConfig::hard(0.5)).unwrap();
    assert_eq!(kept.iter().map(|d| d.score).collect::<Vec<_>>(), vec![0.9, 0.7]);
}

#[test]
fn single_soft_discount() {
    let dets = vec![det(1, 0, 1, bbox(0.0, 0.0, 10.0, 10.0), 0.95), det(2, 0, 1, bbox(0.0, 0.0, 10.0, 5.0), 0.9)];
    let kept = suppress(&dets, &SuppressionConfig::soft(0.2)).unwrap();
    assert!((kept[1].score - 0.9 * (-0.25f64 / 0.2).exp()).abs() < 1e-12);
    assert!((kept[1].score - 0.257854).abs() < 1e-6);
}

#[test]
fn sigma_monotonicity_fails_off_star() {
    // A disjoint from C; B overlaps both
    let a = det(1, 0, 1, bbox(0.0, 0.0, 10.0, 10.0), 0.9);
    let b = det(2, 0, 1, bbox(6.0, 0.0, 16.0, 10.0), 0.8);
    let c = det(3, 0, 1, bbox(12.0, 0.0, 22.0, 10.0), 0.7);
    let c_score = |sigma: f64| {
        let kept = suppress(&[a.clone(), b.clone(), c.clone()], &SuppressionConfig::soft(sigma)).unwrap();
        kept.iter().find(|d| d.id == 3).map_or(0.0, |d| d.score)
    };
    assert_eq!(iou(&a.bbox, &c.bbox), 0.0);
    let (small, large) = (c_score(0.005), c_score(1.0));
    assert!(small > large, "{small} vs {large}");
}

/// Anchor plus satellites that overlap the anchor but not each other.
fn star(rng: &mut ChaCha8Rng) -> Vec<Detection> {
    let mut dets = vec![det(0, 0, 1, bbox(40.0, 40.0, 60.0, 60.0), 0.99)];
    let spots = [(30.0, 30.0), (50.0, 30.0), (30.0, 50.0), (50.0, 50.0)];
    for (i, (x, y)) in spots.iter().enumerate() {
        if rng.gen_bool(0.8) {
            let s = rng.gen_range(0.0..6.0);
            dets.push(det(
                i as u64 + 1,
                0,
                1,
                bbox(x + s, y + s, x + 14.0 - s, y + 14.0 - s),
                rng.gen_range(0.01..0.98),
            ));
        }
    }
    dets
}

proptest! {
    #[test]
    fn permutation_invariant(seed in any::<u64>(), sigma in 0.05..1.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(0..60);
        let dets = random_image(&mut rng, n, 2);
        let mut shuffled = dets.clone();
        shuffled.shuffle(&mut rng);
        for cfg in [SuppressionConfig::hard(0.5), SuppressionConfig::soft(sigma)] {
            prop_assert_eq!(suppress(&dets, &cfg).unwrap(), suppress(&shuffled, &cfg).unwrap());
        }
    }

    #[test]
    fn hard_output_has_no_overlapping_pair(seed in any::<u64>(), t in 0.1..0.9f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(0..60);
        let dets = random_image(&mut rng, n, 2);
        let kept = suppress(&dets, &SuppressionConfig::hard(t)).unwrap();
        prop_assert!(kept.windows(2).all(|w| rank_order(&w[0], &w[1]).is_lt()));
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(a.category_id != b.category_id || iou(&a.bbox, &b.bbox) < t);
            }
            prop_assert!(dets.iter().any(|d| d == a));
        }
    }

    #[test]
    fn soft_never_raises_scores(seed in any::<u64>(), sigma in 0.05..1.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(0..60);
        let dets = random_image(&mut rng, n, 2);
        for k in suppress(&dets, &SuppressionConfig::soft(sigma)).unwrap() {
            let raw = dets.iter().find(|d| d.id == k.id).unwrap().score;
            prop_assert!(k.score <= raw && k.score > 0.001);
        }
    }

    #[test]
    fn star_scores_monotone_in_sigma(seed in any::<u64>(), s1 in 0.02..1.0f64, s2 in 0.02..1.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dets = star(&mut rng);
        let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
        let cfg = |s| SuppressionConfig::soft(s).with_floor(0.0);
        let low = suppress(&dets, &cfg(lo)).unwrap();
        let high = suppress(&dets, &cfg(hi)).unwrap();
        for d in &low {
            let h = high.iter().find(|x| x.id == d.id).unwrap();
            prop_assert!(h.score >= d.score);
        }
    }
}
