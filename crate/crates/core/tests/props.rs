//! Randomized invariants over the augmentation, metrics, partition, and
//! pseudo-label operators.

use std::collections::HashSet;

use ndarray::{Array2, Array3, Array4, Axis};
use proptest::prelude::*;

use mkdseg::augment::{
    apply_cutmix_images, sample_cutmix_mask_with_fractions, strong_augment, weak_augment,
    AugmentParams,
};
use mkdseg::data::{make_partition, DatasetItem, SegDataset};
use mkdseg::losses::pseudo_label;
use mkdseg::metrics::ConfusionMatrix;
use mkdseg::rng::{stream_rng, Stream};
use mkdseg::types::{ImageBatch, LabelMap, LogitsMap, IGNORE_LABEL};

use rand::Rng;

fn image_strategy(h: usize, w: usize) -> impl Strategy<Value = Array4<f64>> {
    proptest::collection::vec(0.0f64..=1.0, h * w * 3)
        .prop_map(move |v| Array4::from_shape_vec((1, h, w, 3), v).unwrap())
}

fn label_strategy(h: usize, w: usize, classes: u8) -> impl Strategy<Value = Array3<u8>> {
    proptest::collection::vec(0..classes, h * w)
        .prop_map(move |v| Array3::from_shape_vec((1, h, w), v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn weak_view_labels_are_subset_of_input_classes(
        img in image_strategy(8, 8),
        labels in label_strategy(8, 8, 4),
        seed in 0u64..5000,
    ) {
        let x = ImageBatch::new(img).unwrap();
        let y = LabelMap::new(labels, 4).unwrap();
        let input_classes: HashSet<u8> = y.data().iter().cloned().collect();
        let mut rng = stream_rng(seed, Stream::AugWeakLabeled, 0);
        let (_, y_out, _) = weak_augment(&x, Some(&y), (8, 8), &AugmentParams::default(), &mut rng).unwrap();
        for &v in y_out.unwrap().data().iter() {
            prop_assert!(v == IGNORE_LABEL || input_classes.contains(&v));
        }
    }

    #[test]
    fn weak_views_replay_identically_per_seed(
        img in image_strategy(10, 12),
        seed in 0u64..5000,
    ) {
        let x = ImageBatch::new(img).unwrap();
        let mut r1 = stream_rng(seed, Stream::AugWeakUnlabeled, 3);
        let mut r2 = stream_rng(seed, Stream::AugWeakUnlabeled, 3);
        let (a, _, ga) = weak_augment(&x, None, (8, 8), &AugmentParams::default(), &mut r1).unwrap();
        let (b, _, gb) = weak_augment(&x, None, (8, 8), &AugmentParams::default(), &mut r2).unwrap();
        prop_assert_eq!(ga, gb);
        prop_assert_eq!(a.data(), b.data());
    }

    #[test]
    fn strong_views_stay_in_range_and_shape(
        img in image_strategy(9, 7),
        seed in 0u64..5000,
    ) {
        let x = ImageBatch::new(img).unwrap();
        let mut rng = stream_rng(seed, Stream::AugStrong, 0);
        let out = strong_augment(&x, &AugmentParams::default(), &mut rng).unwrap();
        prop_assert_eq!(out.data().dim(), x.data().dim());
        for &v in out.data().iter() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn cutmix_mask_area_matches_box(
        frac in 0.0f64..=1.0,
        seed in 0u64..5000,
    ) {
        let mut rng = stream_rng(seed, Stream::CutMix, 0);
        let mask = sample_cutmix_mask_with_fractions(16, 20, &[frac], &mut rng).unwrap();
        let b = &mask.boxes()[0];
        let ones: usize = mask.mask().iter().map(|&v| usize::from(v)).sum();
        prop_assert_eq!(ones, b.height * b.width);
        // box edge length follows the square-root law
        let expect_h = ((16.0 * frac.sqrt()).round() as usize).min(16);
        prop_assert_eq!(b.height, expect_h);
    }

    #[test]
    fn cutmix_pixels_come_from_exactly_one_source(
        img_a in image_strategy(8, 8),
        img_b in image_strategy(8, 8),
        frac in 0.0f64..=1.0,
        seed in 0u64..5000,
    ) {
        let a = ImageBatch::new(img_a).unwrap();
        let b = ImageBatch::new(img_b).unwrap();
        let mut rng = stream_rng(seed, Stream::CutMix, 1);
        let mask = sample_cutmix_mask_with_fractions(8, 8, &[frac], &mut rng).unwrap();
        let mixed = apply_cutmix_images(&a, &b, &mask).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let m = mask.mask()[[0, y, x]];
                for c in 0..3 {
                    let v = mixed.data()[[0, y, x, c]];
                    let src = if m == 1 { b.data()[[0, y, x, c]] } else { a.data()[[0, y, x, c]] };
                    prop_assert_eq!(v.to_bits(), src.to_bits());
                }
            }
        }
    }

    #[test]
    fn pseudo_label_matches_manual_argmax(
        vals in proptest::collection::vec(-5.0f64..5.0, 2 * 3 * 4),
        tau in proptest::option::of(0.5f64..1.0),
    ) {
        let logits = LogitsMap::new(Array4::from_shape_vec((1, 2, 3, 4), vals).unwrap()).unwrap();
        let res = pseudo_label(&logits, tau).unwrap();
        for y in 0..2 {
            for x in 0..3 {
                let z: Vec<f64> = (0..4).map(|c| logits.data()[[0, y, x, c]]).collect();
                let mut best = 0usize;
                for c in 1..4 {
                    if z[c] > z[best] {
                        best = c;
                    }
                }
                prop_assert_eq!(res.labels.data()[[0, y, x]], best as u8);
                let m = z[best];
                let denom: f64 = z.iter().map(|v| (v - m).exp()).sum();
                let pmax = 1.0 / denom;
                match tau {
                    None => prop_assert!(res.valid[[0, y, x]]),
                    Some(t) => prop_assert_eq!(res.valid[[0, y, x]], pmax >= t),
                }
            }
        }
    }

    #[test]
    fn confusion_matrix_is_permutation_invariant_and_additive(
        pred in proptest::collection::vec(0u8..3, 24),
        truth in proptest::collection::vec(0u8..3, 24),
        perm_seed in 0u64..1000,
    ) {
        let as_map = |v: &[u8]| {
            LabelMap::new(Array3::from_shape_vec((1, 4, 6), v.to_vec()).unwrap(), 3).unwrap()
        };
        let mut direct = ConfusionMatrix::new(3);
        direct.accumulate(&as_map(&pred), &as_map(&truth)).unwrap();

        // joint shuffle
        let mut order: Vec<usize> = (0..24).collect();
        let mut rng = stream_rng(perm_seed, Stream::McOracle, 0);
        for i in (1..24usize).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let pred_p: Vec<u8> = order.iter().map(|&i| pred[i]).collect();
        let truth_p: Vec<u8> = order.iter().map(|&i| truth[i]).collect();
        let mut shuffled = ConfusionMatrix::new(3);
        shuffled.accumulate(&as_map(&pred_p), &as_map(&truth_p)).unwrap();
        prop_assert_eq!(direct.counts(), shuffled.counts());

        // split into two halves and merge
        let mut halves = ConfusionMatrix::new(3);
        let head = |v: &[u8]| LabelMap::new(Array3::from_shape_vec((1, 2, 6), v[..12].to_vec()).unwrap(), 3).unwrap();
        let tail = |v: &[u8]| LabelMap::new(Array3::from_shape_vec((1, 2, 6), v[12..].to_vec()).unwrap(), 3).unwrap();
        halves.accumulate(&head(&pred), &head(&truth)).unwrap();
        let mut second = ConfusionMatrix::new(3);
        second.accumulate(&tail(&pred), &tail(&truth)).unwrap();
        halves.merge(&second);
        prop_assert_eq!(direct.counts(), halves.counts());
    }

    #[test]
    fn miou_stays_in_unit_interval(
        pred in proptest::collection::vec(0u8..4, 30),
        truth in proptest::collection::vec(0u8..4, 30),
    ) {
        let as_map = |v: &[u8]| {
            LabelMap::new(Array3::from_shape_vec((1, 5, 6), v.to_vec()).unwrap(), 4).unwrap()
        };
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&as_map(&pred), &as_map(&truth)).unwrap();
        let report = cm.miou().unwrap();
        prop_assert!((0.0..=1.0).contains(&report.mean));
        let diagonal = pred == truth;
        if diagonal {
            prop_assert_eq!(report.mean, 1.0);
        }
    }

    #[test]
    fn partition_sizes_are_exact(
        count in 1usize..40,
        n in 1usize..40,
        seed in 0u64..1000,
    ) {
        prop_assume!(n <= count);
        let items = (0..count)
            .map(|i| DatasetItem {
                id: format!("i{i}"),
                image: Array2::from_elem((16, 16), 0u8).insert_axis(Axis(2)).broadcast((16, 16, 3)).unwrap().to_owned(),
                labels: Some(Array2::zeros((16, 16))),
            })
            .collect();
        let ds = SegDataset::new(items, 2).unwrap();
        let p = make_partition(&ds, n, seed).unwrap();
        prop_assert_eq!(p.labeled_indices().len(), count.div_ceil(n));
        prop_assert_eq!(p.labeled_indices().len() + p.unlabeled_indices().len(), count);
    }
}
