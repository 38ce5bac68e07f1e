//! Tracking metrics, the overlap-based skip rule and the resizing baseline.

use alloc::vec::Vec;

use crate::image::resize;
use crate::tracker::BBox;
use crate::{Error, Result, Tensor};

/// Center-error threshold at the 48-pixel search scale.
pub const PRECISION_THRESHOLD: f32 = 5.0;

/// Number of IoU thresholds of the success curve, `0, 0.02, ..., 1`.
pub const SUCCESS_STEPS: usize = 51;

fn check(preds: &[BBox], gts: &[BBox]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::Metric("no frames".into()));
    }
    if preds.len() != gts.len() {
        return Err(Error::Metric(alloc::format!("{} predictions for {} ground truths", preds.len(), gts.len())));
    }
    Ok(())
}

/// Percentage of frames whose center error is at most `thresh` pixels.
pub fn precision(preds: &[BBox], gts: &[BBox], thresh: f32) -> Result<f32> {
    check(preds, gts)?;
    let hits = preds.iter().zip(gts).filter(|(p, g)| p.center_distance(g) <= thresh).count();
    Ok(100.0 * hits as f32 / preds.len() as f32)
}

/// Success rate at each IoU threshold. A frame succeeds at `θ` when its IoU
/// is positive and at least `θ`.
pub fn success_curve(preds: &[BBox], gts: &[BBox]) -> Result<Vec<f32>> {
    check(preds, gts)?;
    let ious: Vec<f32> = preds.iter().zip(gts).map(|(p, g)| p.iou(g)).collect();
    Ok((0..SUCCESS_STEPS)
        .map(|i| {
            let th = i as f32 / (SUCCESS_STEPS - 1) as f32;
            ious.iter().filter(|&&o| o > 0.0 && o >= th).count() as f32 / ious.len() as f32
        })
        .collect())
}

/// Mean of the success curve, in `[0, 1]`.
pub fn success_auc(preds: &[BBox], gts: &[BBox]) -> Result<f32> {
    let curve = success_curve(preds, gts)?;
    Ok(curve.iter().sum::<f32>() / curve.len() as f32)
}

/// Skip the defense when the previous two boxes overlap at least `threshold`.
pub fn skip_policy(prev_overlap: f32, threshold: f32) -> bool {
    prev_overlap >= threshold
}

/// Bilinear downsampling by `r` then upsampling back to the input size.
pub fn resize_defense(patch: &Tensor, r: f32) -> Result<Tensor> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::Config(alloc::format!("resize factor {} outside (0, 1]", r)));
    }
    let (h, w, _) = patch.dims3()?;
    if r == 1.0 {
        return Ok(patch.clone());
    }
    let sh = (libm::roundf(h as f32 * r) as usize).max(1);
    let sw = (libm::roundf(w as f32 * r) as usize).max(1);
    resize(&resize(patch, sh, sw)?, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn boxes(n: usize) -> Vec<BBox> {
        (0..n).map(|i| BBox::new(10.0 + i as f32, 20.0, 8.0, 6.0)).collect()
    }

    #[test]
    fn precision_examples() {
        let g = boxes(4);
        assert_eq!(precision(&g, &g, 5.0).unwrap(), 100.0);
        let far: Vec<BBox> = g.iter().map(|b| BBox { cx: b.cx + 50.0, ..*b }).collect();
        assert_eq!(precision(&far, &g, 5.0).unwrap(), 0.0);
        let half: Vec<BBox> = g.iter().enumerate().map(|(i, b)| if i % 2 == 0 { *b } else { far[i] }).collect();
        assert_eq!(precision(&half, &g, 5.0).unwrap(), 50.0);
        assert!(precision(&[], &[], 5.0).is_err());
        assert!(precision(&g[..2], &g, 5.0).is_err());
    }

    #[test]
    fn success_examples() {
        let g = boxes(3);
        assert_eq!(success_auc(&g, &g).unwrap(), 1.0);
        let far: Vec<BBox> = g.iter().map(|b| BBox { cx: b.cx + 50.0, ..*b }).collect();
        assert_eq!(success_auc(&far, &g).unwrap(), 0.0);
        // shifting a 6-tall box by 2 rows gives IoU 4 / 8
        let shifted: Vec<BBox> = g.iter().map(|b| BBox { cy: b.cy + 2.0, ..*b }).collect();
        for (p, q) in shifted.iter().zip(&g) {
            assert_eq!(p.iou(q), 0.5);
        }
        // thresholds 0, 0.02, ..., 0.5 succeed: 26 of 51
        let auc = success_auc(&shifted, &g).unwrap();
        assert!((auc - 26.0 / 51.0).abs() < 1e-6, "{}", auc);
    }

    #[test]
    fn skip_examples() {
        assert!(!skip_policy(0.97, 1.0));
        assert!(skip_policy(1.0, 1.0));
        assert!(skip_policy(0.0, 0.0));
        assert!(skip_policy(0.3, 0.0));
    }

    #[test]
    fn resize_examples() {
        let mut rng = crate::rng::seeded(1);
        let p = Tensor::new([12, 10, 3], (0..360).map(|_| crate::rng::uniform(&mut rng, 0.0, 1.0)).collect()).unwrap();
        assert!(resize_defense(&p, 1.0).unwrap().max_abs_diff(&p).unwrap() <= 1e-6);
        // identity through the resampling path at equal size
        assert!(resize(&p, 12, 10).unwrap().max_abs_diff(&p).unwrap() <= 1e-6);
        for r in [0.9, 0.5, 0.1] {
            assert_eq!(resize_defense(&p, r).unwrap().shape(), p.shape());
        }
        assert!(resize_defense(&p, 0.0).is_err());
        assert!(resize_defense(&p, 1.5).is_err());
        let flat = Tensor::full([8, 8, 3], 0.4);
        assert!(resize_defense(&flat, 0.5).unwrap().data().iter().all(|v| (v - 0.4).abs() < 1e-6));
    }
}
