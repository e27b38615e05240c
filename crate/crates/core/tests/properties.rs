use proptest::prelude::*;

use renn_core::attack::{knn_infer, rank_of_estimate, reconstruction_error};
use renn_core::dary::DaryPayload;
use renn_core::dense::softmax;
use renn_core::layers::{layer_forward, Layer};
use renn_core::rotation::{angle_between, validate_rotation};
use renn_core::tensor::{embed_feature, project_feature, rotate_inverse};
use renn_core::training::cross_entropy;
use renn_core::{rotate, sample_rotation, DAryTensor, Matrix, Seed};

fn tensor(n: usize, d: usize, seed: u64) -> DAryTensor {
    DAryTensor::new(n, d, Matrix::random_normal(n, d, 1.0, Seed(seed)).into_data()).unwrap()
}

fn layer_for(kind: usize, n: usize, seed: u64) -> Layer {
    match kind {
        0 => Layer::Conv {
            weights: Matrix::random_normal(3, n, 0.7, Seed(seed)),
        },
        1 => Layer::Relu { c: 0.8 },
        2 => Layer::BatchNorm { eps: 1e-5 },
        3 => Layer::AvgPool { window: n },
        4 => Layer::MaxPool { window: n },
        _ => Layer::Dropout { rate: 0.4 },
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sampled_rotations_are_valid(d in 2usize..7, seed in any::<u64>()) {
        let r = sample_rotation(d, Seed(seed)).unwrap();
        prop_assert!(validate_rotation(&r.to_matrix()).unwrap().passed());
    }

    #[test]
    fn rotate_then_inverse_is_identity(n in 1usize..20, d in 2usize..6, seed in any::<u64>()) {
        let f = tensor(n, d, seed);
        let r = sample_rotation(d, Seed(seed ^ 1)).unwrap();
        let back = rotate_inverse(&rotate(&f, &r).unwrap(), &r).unwrap();
        prop_assert!(back.max_abs_diff(&f) < 1e-12);
    }

    #[test]
    fn every_op_commutes_with_rotation(kind in 0usize..6, n in 1usize..12, d in 2usize..6, seed in any::<u64>()) {
        let layer = layer_for(kind, n, seed);
        let batch = vec![tensor(n, d, seed ^ 2), tensor(n, d, seed ^ 3)];
        let r = sample_rotation(d, Seed(seed ^ 4)).unwrap();
        let rotated: Vec<_> = batch.iter().map(|f| rotate(f, &r).unwrap()).collect();
        let (a, _) = layer_forward(&layer, &rotated, Seed(seed), true).unwrap();
        let (b, _) = layer_forward(&layer, &batch, Seed(seed), true).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!(x.max_abs_diff(&rotate(y, &r).unwrap()) < 1e-10);
        }
    }

    #[test]
    fn angles_form_a_metric(d in 2usize..6, s in any::<u64>()) {
        let [a, b, c] = [0, 1, 2].map(|k| sample_rotation(d, Seed(s).derive(k)).unwrap());
        let ab = angle_between(&a, &b).unwrap();
        prop_assert_eq!(angle_between(&a, &a).unwrap(), 0.0);
        prop_assert!((ab - angle_between(&b, &a).unwrap()).abs() < 1e-15);
        prop_assert!((0.0..=std::f64::consts::PI).contains(&ab));
        prop_assert!(angle_between(&a, &c).unwrap() <= ab + angle_between(&b, &c).unwrap() + 1e-12);
    }

    #[test]
    fn dary_round_trip(n in 1usize..30, d in 1usize..6, seed in any::<u64>()) {
        let p = DaryPayload::new(n, d, Matrix::random_normal(n, d, 3.0, Seed(seed)).into_data()).unwrap();
        let bytes = p.to_bytes();
        prop_assert_eq!(bytes.len(), 16 + 8 * n * d);
        prop_assert_eq!(DaryPayload::from_bytes(&bytes).unwrap(), p);
    }

    #[test]
    fn reconstruction_error_is_a_metric(v in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0), 1..20)) {
        let a: Vec<f64> = v.iter().map(|t| t.0).collect();
        let b: Vec<f64> = v.iter().map(|t| t.1).collect();
        let c: Vec<f64> = v.iter().map(|t| t.2).collect();
        let ab = reconstruction_error(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(reconstruction_error(&a, &a).unwrap(), 0.0);
        prop_assert_eq!(ab, reconstruction_error(&b, &a).unwrap());
        prop_assert!(reconstruction_error(&a, &c).unwrap() <= ab + reconstruction_error(&b, &c).unwrap() + 1e-12);
    }

    #[test]
    fn knn_ignores_training_order(seed in any::<u64>(), k in prop::sample::select(vec![1usize, 3, 5]), shift in 0usize..12) {
        let feats: Vec<Vec<f64>> = (0..12u64).map(|i| Matrix::random_normal(1, 3, 1.0, Seed(seed).derive(i)).into_data()).collect();
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let query = Matrix::random_normal(1, 3, 1.0, Seed(seed).derive(99)).into_data();
        let mut pf = feats.clone();
        let mut pl = labels.clone();
        pf.rotate_left(shift);
        pl.rotate_left(shift);
        prop_assert_eq!(knn_infer(&feats, &labels, &query, k).unwrap(), knn_infer(&pf, &pl, &query, k).unwrap());
    }

    #[test]
    fn rank_is_monotone(a in 0.0f64..=std::f64::consts::PI, b in 0.0f64..=std::f64::consts::PI, d in prop::sample::select(vec![2usize, 3, 5])) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(rank_of_estimate(lo, d).unwrap() <= rank_of_estimate(hi, d).unwrap());
    }

    #[test]
    fn embedding_round_trips(n in 1usize..10, d in 2usize..4, extra in 1usize..3, seed in any::<u64>()) {
        let f = tensor(n, d, seed);
        let up = embed_feature(&f, d + extra).unwrap();
        prop_assert_eq!(project_feature(&up, d).unwrap(), f);
    }

    #[test]
    fn cross_entropy_is_nonnegative(scores in prop::collection::vec(-30.0f64..30.0, 2..6), label in 0usize..2) {
        prop_assert!(cross_entropy(&scores, label).unwrap() >= 0.0);
        prop_assert!((softmax(&scores).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
