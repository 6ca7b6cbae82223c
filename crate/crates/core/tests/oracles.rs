mod common;

use neatnet::vae::Reconstruction;

#[test]
fn every_primitive_matches_finite_differences() {
    for seed in 0..3 {
        for (name, inputs, build) in common::primitives(seed) {
            let err = common::grad_check(&inputs, build.as_ref(), seed).unwrap();
            assert!(err < common::GRAD_TOLERANCE, "{name}: {err:e}");
        }
    }
}

#[test]
fn gat_layer_matches_finite_differences() {
    let (inputs, build) = common::gat_case(11);
    let err = common::grad_check(&inputs, build.as_ref(), 1).unwrap();
    assert!(err < common::GRAD_TOLERANCE, "{err:e}");
}

#[test]
fn extractor_matches_finite_differences() {
    let (inputs, build) = common::extractor_case(12);
    let err = common::grad_check(&inputs, build.as_ref(), 2).unwrap();
    assert!(err < common::GRAD_TOLERANCE, "{err:e}");
}

#[test]
fn full_objective_matches_finite_differences() {
    let toy = common::toy_loss(3);
    for (beta, red) in [(0.08, Reconstruction::SumPerUser), (1.0, Reconstruction::MeanCoordinate)] {
        let (err, n) = common::loss_grad_check(&toy, beta, red).unwrap();
        assert!(n > 100);
        assert!(err < common::GRAD_TOLERANCE, "{red:?}: {err:e}");
    }
}

#[test]
fn kl_matches_closed_form() {
    common::kl_closed_form().unwrap();
}

#[test]
fn supergraph_matches_sequential_layers() {
    for seed in 0..50 {
        let d = common::layer_batching(seed).unwrap();
        assert!(d <= 1e-9, "seed {seed}: {d:e}");
    }
}

#[test]
fn em_is_monotone_and_bic_finds_two_modes() {
    common::em_suite().unwrap();
}

#[test]
fn pose_graph_recovers_a_planted_scene() {
    let s = common::pose_graph_recovery_stats(5).unwrap();
    assert!(s.median_error < 0.05 * common::plant_extent(), "{}", s.median_error);
}
