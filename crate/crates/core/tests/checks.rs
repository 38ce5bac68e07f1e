use std::time::Instant;

use lrr_core::checks::{gradient_checks, oracle_check, weight_laws};

#[test]
fn batched_render_matches_loop() {
    let t = Instant::now();
    for seed in 0..3 {
        let d = oracle_check(8, 3, seed).unwrap();
        assert!(d <= 1e-5, "seed {} diff {}", seed, d);
    }
    assert!(t.elapsed().as_secs() < 60);
}

#[test]
fn weights_sum_to_one_and_are_one_hot_on_grid() {
    let r = weight_laws(10_000, 9, 7, 5, 3).unwrap();
    assert!(r.spatial_sum_error <= 1e-6, "{:?}", r);
    assert!(r.temporal_sum_error <= 1e-6, "{:?}", r);
    assert!(r.min_weight >= 0.0, "{:?}", r);
    assert_eq!(r.one_hot_failures, 0);
}

#[test]
fn module_gradients_match_finite_differences() {
    let t = Instant::now();
    for c in gradient_checks(11).unwrap() {
        println!("{} {:.2e}", c.name, c.worst);
        assert!(c.worst <= 1e-3, "{} {}", c.name, c.worst);
    }
    assert!(t.elapsed().as_secs() < 120);
}
