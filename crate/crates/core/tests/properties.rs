//! Property tests of the cross-module invariants: metric ranges and
//! symmetries, partition/closure laws of clustering and augmentation,
//! test statistics symmetries, Ripley order-invariance, and the
//! duplication invariance of the calibrated confidence.

use proptest::prelude::*;

use microquant_core::boundary::{one_sample_prop_test, two_sample_prop_test};
use microquant_core::calibrate::{confidence, fit_calibration};
use microquant_core::defect::{
    cluster_defects, match_and_box_iou, AnalysisConfig, BoxedDefect, Rect,
};
use microquant_core::metrics::{
    confusion, f_beta, f_d, iou_pixel, precision_recall, ConfusionMatrix,
};
use microquant_core::prep::{assign_split, augment_d4, Chip};
use microquant_core::raster::{class_counts, ClassId, LabelMap, Micrograph, ScoreStack};
use microquant_core::spatial::{ripley_k_univariate, EdgeCorrection, PointPattern, Window};

fn arb_label_map(max_side: u32) -> impl Strategy<Value = LabelMap> {
    (2u32..=max_side, 2u32..=max_side).prop_flat_map(|(w, h)| {
        proptest::collection::vec(0usize..5, (w * h) as usize).prop_map(move |vals| {
            let pixels = vals
                .into_iter()
                .map(|v| ClassId::from_index(v).unwrap())
                .collect();
            LabelMap::new(w, h, pixels, 0.1).unwrap()
        })
    })
}

fn arb_confusion() -> impl Strategy<Value = ConfusionMatrix> {
    proptest::collection::vec(0u64..200, 25).prop_map(|vals| {
        let mut counts = [[0u64; 5]; 5];
        for (i, v) in vals.into_iter().enumerate() {
            counts[i / 5][i % 5] = v;
        }
        ConfusionMatrix { counts }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn class_proportions_sum_to_one(map in arb_label_map(24)) {
        let counts = class_counts(&map);
        let total: f64 = counts.proportions.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert_eq!(counts.counts.iter().sum::<u64>(), counts.total);
    }

    #[test]
    fn metric_values_stay_in_unit_interval(cm in arb_confusion()) {
        prop_assume!(cm.total() > 0);
        for (p, r) in precision_recall(&cm) {
            if let Some(p) = p { prop_assert!((0.0..=1.0).contains(&p)); }
            if let Some(r) = r { prop_assert!((0.0..=1.0).contains(&r)); }
        }
        let fd = f_d(&cm);
        prop_assert!((0.0..=1.0).contains(&fd));
        if let Some(iou) = iou_pixel(&cm) {
            prop_assert!((0.0..=1.0).contains(&iou));
        }
    }

    #[test]
    fn f1_is_symmetric_and_monotone(
        p in 0.0f64..=1.0,
        r in 0.0f64..=1.0,
        dp in 0.0f64..=0.5,
        beta in 0.0f64..=4.0,
    ) {
        let f_pr = f_beta(p, r, 1.0).unwrap();
        let f_rp = f_beta(r, p, 1.0).unwrap();
        prop_assert!((f_pr - f_rp).abs() < 1e-12);
        // monotone non-decreasing in precision for any beta
        let lo = f_beta(p, r, beta).unwrap();
        let hi = f_beta((p + dp).min(1.0), r, beta).unwrap();
        prop_assert!(hi >= lo - 1e-12);
        let hi_r = f_beta(p, (r + dp).min(1.0), beta).unwrap();
        prop_assert!(hi_r >= lo - 1e-12);
    }

    #[test]
    fn permutation_confusion_scores_zero(shift in 1usize..5) {
        // total misclassification: class i always predicted as i+shift
        let mut counts = [[0u64; 5]; 5];
        for i in 0..5 {
            counts[i][(i + shift) % 5] = 10;
        }
        let cm = ConfusionMatrix { counts };
        prop_assert_eq!(iou_pixel(&cm), Some(0.0));
        prop_assert_eq!(f_d(&cm), 0.0);
    }

    #[test]
    fn self_confusion_is_diagonal(map in arb_label_map(16)) {
        let cm = confusion(&map, &map).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                if i != j {
                    prop_assert_eq!(cm.counts[i][j], 0);
                }
            }
        }
    }

    #[test]
    fn defect_pixels_partition_class_mask(map in arb_label_map(20)) {
        let cfg = AnalysisConfig::default();
        for class in ClassId::DEFECTS {
            let defects = cluster_defects(&map, class, &cfg).unwrap();
            let mut all: Vec<(u32, u32)> =
                defects.iter().flat_map(|d| d.pixels.clone()).collect();
            let n_total = all.len();
            all.sort();
            all.dedup();
            prop_assert_eq!(all.len(), n_total, "pixel sets must be disjoint");
            let mask_count = map.pixels().iter().filter(|&&p| p == class).count();
            prop_assert_eq!(n_total, mask_count);
        }
    }

    #[test]
    fn box_iou_bounded_and_one_iff_identical(
        xs in proptest::collection::vec((0.0f64..50.0, 0.0f64..50.0, 0.5f64..5.0), 1..8),
    ) {
        let scene: Vec<BoxedDefect> = xs
            .iter()
            .map(|&(x, y, s)| BoxedDefect {
                center: (x + s / 2.0, y + s / 2.0),
                rect: Rect { min_x: x, min_y: y, max_x: x + s, max_y: y + s },
            })
            .collect();
        let v = match_and_box_iou(&scene, &scene).unwrap();
        prop_assert!((v - 1.0).abs() < 1e-12);
        // shifted candidates: value stays in [0, 1]
        let shifted: Vec<BoxedDefect> = scene
            .iter()
            .map(|b| BoxedDefect {
                center: (b.center.0 + 1.0, b.center.1),
                rect: Rect {
                    min_x: b.rect.min_x + 1.0,
                    min_y: b.rect.min_y,
                    max_x: b.rect.max_x + 1.0,
                    max_y: b.rect.max_y,
                },
            })
            .collect();
        let v = match_and_box_iou(&scene, &shifted).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn proportion_tests_are_symmetric_with_valid_p(
        n in 0u64..=60,
        extra in 1u64..=60,
        n2 in 0u64..=200,
        extra2 in 1u64..=200,
    ) {
        let total = n + extra;
        let one = one_sample_prop_test(n, total, 0.5, true).unwrap();
        let mirrored = one_sample_prop_test(total - n, total, 0.5, true).unwrap();
        prop_assert!((one.p_value - mirrored.p_value).abs() < 1e-12);
        prop_assert!(one.p_value > 0.0 && one.p_value <= 1.0);

        let total2 = n2 + extra2;
        let two = two_sample_prop_test(n, total, n2, total2, true).unwrap();
        let swapped = two_sample_prop_test(n2, total2, n, total, true).unwrap();
        prop_assert!((two.p_value - swapped.p_value).abs() < 1e-12);
        prop_assert!(two.p_value > 0.0 && two.p_value <= 1.0);
    }

    #[test]
    fn ripley_invariant_under_point_relabeling(seed in 0u64..200, n in 3usize..40) {
        let window = Window::new(1.0, 1.0).unwrap();
        let pattern = microquant_core::spatial::gen_csr(n, &window, seed);
        let radii: Vec<f64> = (1..=8).map(|i| 0.25 * i as f64 / 8.0).collect();
        let base = ripley_k_univariate(&pattern, &radii, EdgeCorrection::Translation).unwrap();
        let mut reversed_points = pattern.points.clone();
        reversed_points.reverse();
        let reversed = PointPattern::new(reversed_points, window).unwrap();
        let k2 = ripley_k_univariate(&reversed, &radii, EdgeCorrection::Translation).unwrap();
        for (a, b) in base.iter().zip(&k2) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn assign_split_is_pure_in_seed(seed in 0u64..1000, n in 1usize..40) {
        let mk = || -> Vec<Chip> {
            (0..n)
                .map(|i| Chip {
                    origin: (i as u32, 0),
                    size: 2,
                    image: Micrograph::filled(2, 2, 0).unwrap(),
                    labels: LabelMap::filled(2, 2, ClassId::Grain, 0.1).unwrap(),
                    split: None,
                })
                .collect()
        };
        let mut a = mk();
        let mut b = mk();
        assign_split(&mut a, 0.8, seed).unwrap();
        assign_split(&mut b, 0.8, seed).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(x.split, y.split);
        }
    }

    #[test]
    fn augment_closed_under_flips(seed in 0u64..500) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = 6u32;
        let img: Vec<u8> = (0..n * n).map(|_| rng.gen()).collect();
        let lab: Vec<ClassId> = (0..n * n)
            .map(|_| ClassId::from_index(rng.gen_range(0..5)).unwrap())
            .collect();
        let chip = Chip {
            origin: (0, 0),
            size: n,
            image: Micrograph::new(n, n, img).unwrap(),
            labels: LabelMap::new(n, n, lab, 0.1).unwrap(),
            split: None,
        };
        let variants = augment_d4(&chip).unwrap();
        prop_assert_eq!(variants.len(), 8);
        let keys: Vec<Vec<u8>> = variants.iter().map(|v| v.image.pixels().to_vec()).collect();
        // horizontally flipping any variant lands back in the set
        for v in &variants {
            let mut flipped = Vec::with_capacity((n * n) as usize);
            for y in 0..n {
                for x in 0..n {
                    flipped.push(v.image.get(n - 1 - x, y));
                }
            }
            prop_assert!(keys.contains(&flipped));
        }
        let base = class_counts(&chip.labels);
        for v in &variants {
            prop_assert_eq!(class_counts(&v.labels).counts, base.counts);
        }
    }
}

/// Duplicating the entire validation set leaves every confidence unchanged.
#[test]
fn confidence_invariant_under_validation_duplication() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);
    let (w, h) = (24u32, 24u32);
    let n = (w * h) as usize;
    let mut scores = vec![0f32; 5 * n];
    for i in 0..n {
        let mut v = [0f32; 5];
        let mut sum = 0.0;
        for slot in v.iter_mut() {
            *slot = rng.gen_range(0.05..1.0);
            sum += *slot;
        }
        for c in 0..5 {
            scores[c * n + i] = v[c] / sum;
        }
    }
    let single = ScoreStack::new(1, h, w, scores.clone()).unwrap();
    let mut both = scores.clone();
    both.extend_from_slice(&scores);
    let doubled = ScoreStack::new(2, h, w, both).unwrap();

    let truth_px: Vec<ClassId> = (0..n)
        .map(|_| ClassId::from_index(rng.gen_range(0..5)).unwrap())
        .collect();
    let truth = LabelMap::new(w, h, truth_px, 0.1).unwrap();

    let m1 = fit_calibration(&single, &truth, 5).unwrap();
    let m2 = fit_calibration(&doubled, &truth, 5).unwrap();
    for i in 0..50 {
        let (x, y) = ((i * 7) % w, (i * 11) % h);
        let feats: Vec<f64> = single
            .score_vector(0, y, x)
            .iter()
            .map(|&v| v as f64)
            .collect();
        let class = single.argmax(0, y, x);
        let a = confidence(&m1, &feats, class);
        let b = confidence(&m2, &feats, class);
        assert!(a.calibratable == b.calibratable);
        assert!(
            (a.value - b.value).abs() < 1e-12,
            "pixel ({x},{y}): {} vs {}",
            a.value,
            b.value
        );
    }
}
