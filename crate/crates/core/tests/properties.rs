use lrr_core::attacks::project_linf;
use lrr_core::metrics::resize_defense;
use lrr_core::stir::{spatial_weights, temporal_weights, TemporalMode};
use lrr_core::Tensor;
use proptest::prelude::*;

fn sum(v: &[f32]) -> f64 {
    v.iter().map(|&w| w as f64).sum()
}

proptest! {
    #[test]
    fn spatial_weights_form_a_partition(h in 2usize..40, w in 2usize..40, fx in 0.0f32..=1.0, fy in 0.0f32..=1.0, k in prop::sample::select(vec![2usize, 4, 6])) {
        let (x, y) = (fx * (h - 1) as f32, fy * (w - 1) as f32);
        let n = spatial_weights(x, y, h, w, k).unwrap();
        prop_assert_eq!(n.sites.len(), k * k);
        prop_assert!((sum(&n.weights) - 1.0).abs() <= 1e-6);
        prop_assert!(n.weights.iter().all(|&v| v >= 0.0));
        prop_assert!(n.sites.iter().all(|&(a, b)| a < h && b < w));
    }

    #[test]
    fn temporal_weights_form_a_partition(frames in 1usize..8, f in 0.0f32..=1.0, dense in any::<bool>()) {
        let tau = f * (frames - 1) as f32;
        let mode = if dense { TemporalMode::Dense } else { TemporalMode::Sparse };
        let n = temporal_weights(tau, frames, mode).unwrap();
        prop_assert!((sum(&n.weights) - 1.0).abs() <= 1e-6);
        prop_assert!(n.weights.iter().all(|&v| v >= 0.0));
        prop_assert!(n.frames.iter().all(|&g| g < frames));
    }

    #[test]
    fn out_of_range_queries_are_rejected(h in 2usize..20, over in 0.01f32..5.0) {
        prop_assert!(spatial_weights((h - 1) as f32 + over, 0.0, h, h, 2).is_err());
        prop_assert!(spatial_weights(-over, 0.0, h, h, 2).is_err());
        prop_assert!(temporal_weights(h as f32 + over, h, TemporalMode::Sparse).is_err());
    }

    #[test]
    fn projection_stays_in_ball(v in prop::collection::vec(-2.0f32..2.0, 1..64), eps in 0.0f32..0.5) {
        let d = Tensor::new([v.len()], v.clone()).unwrap();
        let p = project_linf(&d, eps);
        for (&a, &b) in p.data().iter().zip(&v) {
            prop_assert!(a.abs() <= eps);
            if b.abs() <= eps {
                prop_assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn resize_keeps_shape_and_range(side in 4usize..24, r in 0.1f32..=1.0, seed in any::<u32>()) {
        let data: Vec<f32> = (0..side * side * 3).map(|i| ((i as u32).wrapping_mul(2654435761) ^ seed) as f32 / u32::MAX as f32).collect();
        let x = Tensor::new([side, side, 3], data).unwrap();
        let y = resize_defense(&x, r).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert!(y.data().iter().all(|&v| (-1e-6..=1.0 + 1e-6).contains(&v)));
    }
}

#[test]
fn odd_or_tiny_neighborhoods_are_rejected() {
    assert!(spatial_weights(1.0, 1.0, 4, 4, 3).is_err());
    assert!(spatial_weights(1.0, 1.0, 4, 4, 0).is_err());
}
