mod common;

use common::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use slsdeep::metrics::{binarize, confusion, evaluate_dataset, metrics_from_counts, ConfusionCounts, Mask};
use slsdeep::Tensor;

#[test]
fn counts_and_scores_match_pixel_oracle() {
    let mut r = rng(100);
    for _ in 0..100 {
        let (h, w) = (r.random_range(1..20), r.random_range(1..20));
        let p = r.random_range(0.0..1.0);
        let (pred, gt) = (random_mask(&mut r, h, w, p), random_mask(&mut r, h, w, p));
        let c = confusion(&pred, &gt).unwrap();
        assert_eq!(c, count_oracle(&pred, &gt));
        let s = metrics_from_counts(&c).unwrap();
        for (a, e) in s.values().iter().zip(score_oracle(&c)) {
            assert!((a - e).abs() <= 1e-12);
        }
    }
}

#[test]
fn hand_examples() {
    let pred = Mask::new(2, 2, vec![1, 1, 0, 0]).unwrap();
    let gt = Mask::new(2, 2, vec![1, 0, 0, 0]).unwrap();
    let c = confusion(&pred, &gt).unwrap();
    assert_eq!(c, ConfusionCounts { tp: 1, fp: 1, tn: 2, fn_: 0 });
    let s = metrics_from_counts(&c).unwrap();
    assert_eq!((s.acc, s.sen, s.jac), (0.75, 1.0, 0.5));
    assert!((s.spe - 2.0 / 3.0).abs() < 1e-15 && (s.dic - 2.0 / 3.0).abs() < 1e-15);
    let empty = metrics_from_counts(&ConfusionCounts { tp: 0, fp: 0, tn: 4, fn_: 0 }).unwrap();
    assert_eq!(empty.values(), [1.0; 5]);
}

#[test]
fn binarize_matches_threshold_oracle() {
    let mut r = rng(5);
    let fg = uniform(&mut r, [3, 1, 7, 9], 0.0, 1.0).map(|v| if v < 0.1 { 0.5 } else { v });
    let two = Tensor::from_fn([3, 2, 7, 9], |[n, c, h, w]| if c == 1 { fg.at(n, 0, h, w) } else { 1.0 - fg.at(n, 0, h, w) });
    for input in [&fg, &two] {
        let masks = binarize(input).unwrap();
        for (n, m) in masks.iter().enumerate() {
            for (i, &b) in m.data.iter().enumerate() {
                assert_eq!(b == 1, fg.plane(n, 0)[i] >= 0.5);
            }
        }
    }
}

#[test]
fn aggregate_matches_recomputation_and_ignores_order() {
    let mut r = rng(8);
    let mut pairs: Vec<(String, Mask, Mask)> =
        (0..8).map(|i| (format!("im{i}"), random_mask(&mut r, 12, 10, 0.3), random_mask(&mut r, 12, 10, 0.3))).collect();
    let rep = evaluate_dataset(&pairs, true).unwrap();
    let mut sums = [0.0; 5];
    let mut pooled = ConfusionCounts::default();
    for (_, p, g) in &pairs {
        let c = count_oracle(p, g);
        pooled.tp += c.tp;
        pooled.fp += c.fp;
        pooled.tn += c.tn;
        pooled.fn_ += c.fn_;
        for (s, v) in sums.iter_mut().zip(score_oracle(&c)) {
            *s += v;
        }
    }
    for (a, s) in rep.aggregate.values().iter().zip(sums) {
        assert!((a - s / 8.0).abs() < 1e-12);
    }
    assert_eq!(rep.counts, pooled);
    assert_eq!(rep.pooled.unwrap().values(), score_oracle(&pooled));
    pairs.shuffle(&mut r);
    assert_eq!(evaluate_dataset(&pairs, true).unwrap().aggregate, rep.aggregate);
}

proptest! {
    #[test]
    fn dice_jaccard_identity(tp in 0u64..500, fp in 0u64..500, tn in 0u64..500, fn_ in 0u64..500) {
        prop_assume!(tp + fp + tn + fn_ > 0);
        let s = metrics_from_counts(&ConfusionCounts { tp, fp, tn, fn_ }).unwrap();
        prop_assert!(s.jac <= s.dic && s.dic <= 1.0);
        // 2j/(1+j) with j = tp/(tp+fp+fn) reduces to 2tp/(2tp+fp+fn): compare as integers.
        let (n, d) = (2 * tp, 2 * tp + fp + fn_);
        if d == 0 {
            prop_assert_eq!(s.dic, 1.0);
        } else {
            let (jn, jd) = (tp, tp + fp + fn_);
            prop_assert_eq!(2 * jn * d, n * (jd + jn));
            prop_assert!((s.dic - 2.0 * s.jac / (1.0 + s.jac)).abs() < 1e-12);
        }
    }
}
