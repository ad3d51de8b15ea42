mod common;

use dtnet_core::kernels::conv2d;
use dtnet_core::mdic::{threshold_conv, ThresholdSpec, ThresholdVariant};
use dtnet_core::metrics::{confusion, confusion_all, region_scores, RegionSpec};
use dtnet_core::{FlipKind, LabelMap, Tensor};
use proptest::prelude::*;

fn kind() -> impl Strategy<Value = FlipKind> {
    prop::sample::select(FlipKind::PART_ORDER.to_vec())
}

/// `[n, c, s, s]` real-64 tensor with entries in [-1, 1].
fn square_tensor(n: usize, c: usize, s: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-1.0f64..1.0, n * c * s * s).prop_map(move |d| Tensor::new(vec![n, c, s, s], d).unwrap())
}

fn label_map(classes: u8) -> impl Strategy<Value = LabelMap> {
    prop::collection::vec(0..classes, 64).prop_map(|d| Tensor::new(vec![8, 8], d).unwrap())
}

proptest! {
    #[test]
    fn flips_are_involutions(x in (1usize..6).prop_flat_map(|s| square_tensor(2, 3, s)), k in kind()) {
        prop_assert_eq!(x.flip(k).unwrap().flip(k.inverse()).unwrap(), x);
    }

    #[test]
    fn split_concat_roundtrip(x in (1usize..4, 1usize..6).prop_flat_map(|(q, s)| square_tensor(2, 4 * q, s))) {
        let parts = x.split4().unwrap();
        prop_assert_eq!(Tensor::concat_channels(&parts.iter().collect::<Vec<_>>()).unwrap(), x);
    }

    #[test]
    fn flip_conjugated_conv(
        (x, w) in (1usize..7, prop::sample::select(vec![1usize, 3, 5]))
            .prop_flat_map(|(s, k)| (square_tensor(1, 2, s), square_tensor(3, 2, k))),
        k in kind(),
    ) {
        let lhs = conv2d(&x.flip(k).unwrap(), &w, None).unwrap().flip(k.inverse()).unwrap();
        let rhs = common::conv_direct(&x, &w.flip(k).unwrap());
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-9);
    }

    #[test]
    fn threshold_selects_above_t(xs in prop::collection::vec(-2.0f64..2.0, 1..50), t in 0.0f64..1.5) {
        let x = Tensor::new(vec![xs.len()], xs).unwrap();
        let y = threshold_conv(&x, &ThresholdSpec::hard(t).unwrap());
        for (&v, &o) in x.data().iter().zip(y.data()) {
            prop_assert_eq!(o, if v.max(0.0) > t { v } else { 0.0 });
        }
    }

    #[test]
    fn threshold_count_is_monotone(xs in prop::collection::vec(-2.0f64..2.0, 1..50), t in 0.0f64..1.0, dt in 0.0f64..1.0) {
        let x = Tensor::new(vec![xs.len()], xs).unwrap();
        let nz = |t: f64| threshold_conv(&x, &ThresholdSpec::hard(t).unwrap()).data().iter().filter(|v| **v != 0.0).count();
        prop_assert!(nz(t + dt) <= nz(t));
    }

    #[test]
    fn threshold_zero_is_relu(xs in prop::collection::vec(-2.0f64..2.0, 1..50)) {
        let x = Tensor::new(vec![xs.len()], xs).unwrap();
        let y = threshold_conv(&x, &ThresholdSpec::hard(0.0).unwrap());
        prop_assert!(y.data().iter().zip(x.data()).all(|(&o, &v)| o == v.max(0.0)));
    }

    #[test]
    fn epsilon_variant_has_no_zeros(xs in prop::collection::vec(-2.0f64..2.0, 1..50), t in 0.0f64..1.5) {
        let x = Tensor::new(vec![xs.len()], xs).unwrap();
        let y = threshold_conv(&x, &ThresholdSpec::new(t, ThresholdVariant::Epsilon).unwrap());
        prop_assert!(y.data().iter().all(|&v| v != 0.0));
    }

    #[test]
    fn metrics_match_pixel_loop((pred, truth, k) in (2u8..6).prop_flat_map(|k| (label_map(k), label_map(k), Just(k)))) {
        for c in 0..k {
            let s = confusion(&pred, &truth, c, k as usize).unwrap().scores();
            prop_assert_eq!((s.accuracy, s.sensitivity, s.specificity, s.dice), common::brute_scores(&pred, &truth, c));
        }
        let all = confusion_all(&pred, &truth, k as usize).unwrap();
        prop_assert!(all.iter().all(|c| c.total() == 64));
    }

    #[test]
    fn region_matches_set_oracle(
        (pred, truth, labels, k) in (2u8..6).prop_flat_map(|k| (label_map(k), label_map(k), prop::sample::subsequence((0..k).collect::<Vec<_>>(), 1..=k as usize), Just(k)))
    ) {
        let r = region_scores(&pred, &truth, &RegionSpec::new("r", labels.clone()).unwrap(), k as usize).unwrap();
        prop_assert_eq!((r.dice_plus, r.sens_plus, r.spec_plus), common::brute_region(&pred, &truth, &labels));
    }

    #[test]
    fn dice_is_symmetric((a, b) in (label_map(4), label_map(4)), c in 0u8..4) {
        prop_assert_eq!(confusion(&a, &b, c, 4).unwrap().dice(), confusion(&b, &a, c, 4).unwrap().dice());
    }

    #[test]
    fn region_dice_equals_dice_on_binary((a, b) in (label_map(2), label_map(2))) {
        let r = region_scores(&a, &b, &RegionSpec::new("fg", vec![1]).unwrap(), 2).unwrap();
        prop_assert_eq!(r.dice_plus, confusion(&a, &b, 1, 2).unwrap().dice());
    }
}
