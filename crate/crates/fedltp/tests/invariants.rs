//! Property tests over the crate's structural invariants.

use proptest::prelude::*;

use fedltp::data::partition::{dirichlet_partition, split_train_val_test};
use fedltp::lth::{softmax_probs, weight_based_mask, PruneMode};
use fedltp::metrics::{parse_csv, parse_json, render_csv, render_json, MetricsRow};
use fedltp::nn::{clip_gradient, GradientVector, Mask, ParamLayout, ParamVector};
use fedltp::nn::{LayerSpec, MaskedModel};
use fedltp::rng::RngStream;

fn layer_pair(weights: usize) -> Vec<LayerSpec> {
    vec![LayerSpec::dense(weights - 1, 1), LayerSpec::loss_head(1)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn clipped_norm_never_exceeds_threshold(
        values in prop::collection::vec(-100.0f64..100.0, 1..64),
        c in 1e-3f64..50.0,
    ) {
        let g = GradientVector::from_values(values);
        let clipped = clip_gradient(&g, c);
        prop_assert!(clipped.l2_norm() <= c + 1e-9);
    }

    #[test]
    fn percentile_masks_nest_under_repetition(
        values in prop::collection::vec(-5.0f64..5.0, 4..40),
        degree in 0.05f64..0.9,
    ) {
        let layers = layer_pair(values.len());
        let layout = ParamLayout::new(&layers);
        let mut params = ParamVector::from_values(values);
        let mut prev = Mask::all_ones(params.len());
        for _ in 0..3 {
            let mask = weight_based_mask(&params, &layout, degree, PruneMode::Percentile).unwrap();
            prop_assert!(mask.is_subset_of(&prev));
            prop_assert!(mask.ones() >= 1);
            mask.apply(params.values_mut());
            prev = mask;
        }
    }

    #[test]
    fn threshold_masks_nest_too(
        values in prop::collection::vec(-5.0f64..5.0, 4..40),
        degree in 0.05f64..0.9,
    ) {
        let layers = layer_pair(values.len());
        let layout = ParamLayout::new(&layers);
        let mut params = ParamVector::from_values(values);
        let first = weight_based_mask(&params, &layout, degree, PruneMode::Threshold).unwrap();
        first.apply(params.values_mut());
        let second = weight_based_mask(&params, &layout, degree, PruneMode::Threshold).unwrap();
        prop_assert!(second.is_subset_of(&first));
    }

    #[test]
    fn masked_params_stay_zero_after_updates(
        seed in 0u64..1000,
        steps in 1usize..8,
    ) {
        let mut rng = RngStream::from_seed(seed);
        let layers = fedltp::nn::mlp_layers(4, &[5], 3);
        let dense = MaskedModel::init_dense(layers, &mut rng).unwrap();
        let bits: Vec<u8> = (0..dense.param_count()).map(|_| (rng.uniform() < 0.6) as u8).collect();
        let mask = Mask::from_bits(bits.clone()).unwrap();
        let mut model = dense.with_mask(mask).unwrap();
        let mut buffer = GradientVector::zeros(model.param_count());
        for _ in 0..steps {
            let update = GradientVector::from_values(
                (0..model.param_count()).map(|_| rng.normal()).collect(),
            );
            model.sgd_momentum_step(&update, 0.1, 0.5, &mut buffer);
            for (i, &b) in bits.iter().enumerate() {
                if b == 0 {
                    prop_assert_eq!(model.params().values()[i], 0.0);
                }
            }
        }
    }

    #[test]
    fn dirichlet_partition_conserves_examples(
        seed in 0u64..500,
        clients in 1usize..12,
        classes in 1u32..6,
        per_class in 4usize..30,
        alpha in 0.1f64..100.0,
    ) {
        let labels: Vec<u32> = (0..classes as usize * per_class)
            .map(|i| (i as u32) % classes)
            .collect();
        prop_assume!(labels.len() >= clients);
        let mut rng = RngStream::from_seed(seed);
        let shards = dirichlet_partition(&labels, clients, alpha, &mut rng).unwrap();
        let mut all: Vec<usize> = shards.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
        prop_assert!(shards.iter().all(|s| !s.is_empty()));
    }

    #[test]
    fn split_is_a_partition(
        seed in 0u64..500,
        n in 3usize..80,
        f_val in 0.0f64..0.4,
        f_te in 0.0f64..0.4,
    ) {
        let labels: Vec<u32> = (0..n).map(|i| (i % 3) as u32).collect();
        let idx: Vec<usize> = (0..n).collect();
        let mut rng = RngStream::from_seed(seed);
        let f_tr = 1.0 - f_val - f_te;
        let (tr, va, te) =
            split_train_val_test(&idx, &labels, (f_tr, f_val, f_te), &mut rng).unwrap();
        let mut all = [tr, va, te].concat();
        all.sort_unstable();
        prop_assert_eq!(all, idx);
    }

    #[test]
    fn softmax_is_a_shift_invariant_distribution(
        scores in prop::collection::vec(-50.0f64..50.0, 1..10),
        shift in -100.0f64..100.0,
    ) {
        let p = softmax_probs(&scores, 1.0);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
        let q = softmax_probs(&shifted, 1.0);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn metrics_round_trip_any_finite_floats(
        round in 0u64..1000,
        acc in prop::num::f64::NORMAL,
        val in prop::num::f64::NORMAL,
        eps in prop::num::f64::POSITIVE,
        bits in prop::num::f64::POSITIVE,
        p in 0.0f64..1.0,
        seed in 0u64..u64::MAX,
    ) {
        let row = MetricsRow {
            round,
            test_accuracy: acc,
            noisy_val_score: val,
            epsilon: eps,
            comm_bits_cumulative: bits,
            retention_p: p,
            scheme: "one-shot".into(),
            seed,
        };
        let rows = vec![row];
        prop_assert_eq!(&parse_csv(&render_csv(&rows)).unwrap(), &rows);
        prop_assert_eq!(&parse_json(&render_json(&rows)).unwrap(), &rows);
    }

    #[test]
    fn mask_hex_round_trips(bits in prop::collection::vec(0u8..2, 0..200)) {
        let mask = Mask::from_bits(bits).unwrap();
        let back = Mask::from_hex(&mask.to_hex(), mask.len()).unwrap();
        prop_assert_eq!(mask, back);
    }
}
