// SPDX-License-Identifier: Apache-2.0

use fedbench_core::alignment::{align, GroupParams};
use fedbench_core::harness::{generate, pooled_vertical, ridge_closed_form, FeatureScale, SyntheticSpec};
use fedbench_core::vfl::{predict, train, Hyperparams};

#[test]
fn align_train_predict_recovers_the_generating_model() {
    let spec = SyntheticSpec {
        n_samples: 80,
        n_features_a: 2,
        n_features_b: 2,
        true_weights: vec![0.8, -1.2, 0.4, 2.0],
        noise_sigma: 0.0,
        seed: 12,
        extra_a: 15,
        extra_b: 9,
        feature_scale: FeatureScale::UnitNorm,
    };
    let (a, b) = generate(&spec).unwrap();
    let (matched, _) = align(a.ids(), b.ids(), 1, &GroupParams::test_256()).unwrap();
    assert_eq!(matched.common_count, 80);
    let (a, b) = matched.apply(&a, &b);

    let hp = Hyperparams { learning_rate: 0.5, reg_lambda: 0.0, max_iters: 150, loss_tolerance: 1e-300, ..Hyperparams::default() };
    let mut out = train(&a, &b, &hp, 512, 2).unwrap();
    let theta: Vec<f64> = out.theta_a().iter().chain(out.theta_b()).copied().collect();
    let pooled = pooled_vertical(&a, &b);
    let exact = ridge_closed_form(pooled.features(), pooled.labels().unwrap(), 0.0).unwrap();
    for ((t, e), w) in theta.iter().zip(&exact).zip(&spec.true_weights) {
        assert!((e - w).abs() < 1e-9);
        assert!((t - w).abs() < 1e-6, "{t} vs {w}");
    }

    let ids = &a.ids()[..5];
    let (scores, _) = predict(ids, &mut out.party_a, &mut out.party_b, 3).unwrap();
    for (id, s) in ids.iter().zip(scores) {
        let row = b.position(id).unwrap();
        assert!((s - b.labels().unwrap()[row]).abs() < 1e-5);
    }
}
