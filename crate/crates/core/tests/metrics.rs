use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spliceradar::data::{save_image, Image};
use spliceradar::localizer::write_raw_map;
use spliceradar::metrics::*;

fn bits(v: u32) -> Vec<bool> {
    (0..9).map(|i| v >> i & 1 == 1).collect()
}

#[test]
fn f1_and_mcc_match_pixel_enumeration_on_all_3x3_pairs() {
    for g in 1u32..512 {
        let gt = bits(g);
        for p in 0u32..512 {
            let pred = bits(p);
            let (mut tp, mut fp, mut tn, mut fn_) = (0.0, 0.0, 0.0, 0.0);
            for i in 0..9 {
                match (pred[i], gt[i]) {
                    (true, true) => tp += 1.0,
                    (true, false) => fp += 1.0,
                    (false, false) => tn += 1.0,
                    (false, true) => fn_ += 1.0,
                }
            }
            let f1: f64 = if 2.0 * tp + fp + fn_ == 0.0 {
                0.0
            } else {
                2.0 * tp / (2.0 * tp + fp + fn_)
            };
            let d: f64 = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
            let m = if d == 0.0 {
                0.0
            } else {
                (tp * tn - fp * fn_) / d.sqrt()
            };
            assert_eq!(f1_score(&pred, &gt).unwrap(), f1);
            assert_eq!(mcc(&pred, &gt).unwrap(), m);
        }
    }
}

fn random_instance(rng: &mut ChaCha8Rng, n: usize, levels: u32) -> (Vec<f64>, Vec<bool>) {
    loop {
        let gt: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        if gt.iter().any(|&g| g) && gt.iter().any(|&g| !g) {
            let s = (0..n)
                .map(|_| rng.gen_range(0..levels) as f64 / (levels - 1) as f64)
                .collect();
            return (s, gt);
        }
    }
}

fn pairwise_auc(s: &[f64], gt: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if gt[i] && !gt[j] {
                den += 1.0;
                num += if s[i] > s[j] {
                    1.0
                } else if s[i] == s[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

#[test]
fn auc_matches_pairwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..1000 {
        let levels = if trial % 2 == 0 { 16 } else { 1 << 20 };
        let (s, gt) = random_instance(&mut rng, 64, levels);
        assert!((roc_auc(&s, &gt).unwrap() - pairwise_auc(&s, &gt)).abs() < 1e-12);
    }
}

#[test]
fn optimal_threshold_matches_dense_sweep() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let (s, gt) = random_instance(&mut rng, 8, 256);
        for metric in [Metric::F1, Metric::Mcc] {
            let dense = (0..256)
                .map(|i| {
                    let pred: Vec<bool> = s.iter().map(|&v| v >= i as f64 / 255.0).collect();
                    let c = ConfusionCounts::from_masks(&pred, &gt).unwrap();
                    c.score(metric)
                })
                .fold(f64::NEG_INFINITY, f64::max);
            let (best, t) = optimal_threshold_score(&s, &gt, metric).unwrap();
            assert_eq!(best, dense);
            assert_eq!(confusion_at(&s, &gt, t).unwrap().score(metric), best);
            let fixed = confusion_at(&s, &gt, 0.5).unwrap().score(metric);
            assert!(best >= fixed);
        }
    }
}

fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (4usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(0.0f64..1.0, n),
            prop::collection::vec(any::<bool>(), n),
        )
            .prop_filter("both classes", |(_, g)| {
                g.iter().any(|&b| b) && g.iter().any(|&b| !b)
            })
    })
}

proptest! {
    #[test]
    fn metrics_are_permutation_invariant((s, gt) in instance(), seed in any::<u64>()) {
        let mut idx: Vec<usize> = (0..s.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..idx.len()).rev() {
            idx.swap(i, rng.gen_range(0..=i));
        }
        let s2: Vec<f64> = idx.iter().map(|&i| s[i]).collect();
        let g2: Vec<bool> = idx.iter().map(|&i| gt[i]).collect();
        prop_assert_eq!(roc_auc(&s, &gt).unwrap(), roc_auc(&s2, &g2).unwrap());
        for m in [Metric::F1, Metric::Mcc] {
            prop_assert_eq!(optimal_threshold_score(&s, &gt, m).unwrap(), optimal_threshold_score(&s2, &g2, m).unwrap());
        }
        let pred: Vec<bool> = s.iter().map(|&v| v >= 0.5).collect();
        let p2: Vec<bool> = s2.iter().map(|&v| v >= 0.5).collect();
        prop_assert_eq!(mcc(&pred, &gt).unwrap(), mcc(&p2, &g2).unwrap());
        prop_assert_eq!(f1_score(&pred, &gt).unwrap(), f1_score(&p2, &g2).unwrap());
    }

    #[test]
    fn auc_of_complement((s, gt) in instance()) {
        let mut sorted = s.clone();
        sorted.sort_by(f64::total_cmp);
        prop_assume!(sorted.windows(2).all(|w| w[0] < w[1]));
        let inv: Vec<f64> = s.iter().map(|v| 1.0 - v).collect();
        let a = roc_auc(&s, &gt).unwrap();
        prop_assert!((roc_auc(&inv, &gt).unwrap() - (1.0 - a)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn optimum_survives_increasing_transforms((s, gt) in instance()) {
        let sq: Vec<f64> = s.iter().map(|v| v * v).collect();
        for m in [Metric::F1, Metric::Mcc] {
            let a = optimal_threshold_score(&s, &gt, m).unwrap().0;
            let b = optimal_threshold_score(&sq, &gt, m).unwrap().0;
            prop_assert_eq!(a, b);
            let lo = if m == Metric::F1 { 0.0 } else { -1.0 };
            prop_assert!(a <= 1.0 && a >= lo);
        }
    }
}

fn write_mask(path: &std::path::Path, w: usize, h: usize, mask: &[bool]) {
    let v = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    save_image(&Image::new(w, h, 1, v).unwrap(), path).unwrap();
}

#[test]
fn dataset_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let (maps, masks) = (dir.path().join("maps"), dir.path().join("masks"));
    std::fs::create_dir_all(&maps).unwrap();
    std::fs::create_dir_all(&masks).unwrap();
    let gt: Vec<bool> = (0..16).map(|i| i % 4 < 2 && i < 8).collect();
    write_mask(&masks.join("a.png"), 4, 4, &gt);
    let perfect: Vec<f64> = gt.iter().map(|&b| if b { 0.9 } else { 0.1 }).collect();
    write_raw_map(&maps.join("a.srmap"), 4, 4, &perfect).unwrap();

    let e = evaluate_dataset(&maps, &masks, ThresholdMode::PerImage).unwrap();
    assert_eq!(
        (e.summary.f1, e.summary.mcc, e.summary.auc),
        (1.0, 1.0, 1.0)
    );
    assert_eq!(e.summary.scored, 1);

    // PNG map, a blank mask that must be skipped, and an orphan mask.
    write_mask(&masks.join("b.png"), 4, 4, &gt);
    let inv: Vec<bool> = gt.iter().map(|g| !g).collect();
    write_mask(&maps.join("b.png"), 4, 4, &inv);
    write_mask(&masks.join("c.png"), 4, 4, &[false; 16]);
    write_mask(&maps.join("c.png"), 4, 4, &gt);
    write_mask(&masks.join("orphan.png"), 4, 4, &gt);
    let e = evaluate_dataset(&maps, &masks, ThresholdMode::PerImage).unwrap();
    assert_eq!(e.summary.scored, 2);
    assert_eq!(e.skipped.len(), 1);
    assert_eq!(e.skipped[0].image, "c");
    assert_eq!(e.unmatched.len(), 1);
    assert_eq!(e.unmatched, vec!["masks/orphan.png".to_string()]);
    assert_eq!(e.images[1].auc, 0.0);
    assert_eq!(e.summary.auc, 0.5);
    let g = evaluate_dataset(&maps, &masks, ThresholdMode::Global).unwrap();
    assert_eq!(g.mode, ThresholdMode::Global);
    assert_eq!(g.images[0].f1_threshold, g.images[1].f1_threshold);
}

#[test]
fn dataset_mean_is_average_of_images() {
    let items: Vec<ScoredImage> = [(0.75f64, "x"), (0.25, "y")]
        .iter()
        .map(|&(hi, id)| ScoredImage {
            id: id.into(),
            scores: vec![0.5, hi, 0.2, 0.6],
            gt: vec![true, false, false, true],
        })
        .collect();
    let e = evaluate_images(&items, ThresholdMode::PerImage).unwrap();
    let a = e.images[0].auc;
    let b = e.images[1].auc;
    assert_eq!((a, b), (0.5, 1.0));
    assert_eq!(e.summary.auc, 0.75);
}
