//! Background fidelity and removal-activity measures over latent grids.
//!
//! Masks are given at latent resolution and broadcast over channels.
//! Perceptual scores (FID, LPIPS, CLIP) need pretrained networks and are not
//! computed here.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::latent::{LatentError, LatentGrid};
use crate::masking::ObjectMask;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Latent(#[from] LatentError),
    #[error("mask has no background pixels")]
    NoBackground,
    #[error("mask has no object pixels")]
    EmptyMask,
    #[error("mask is {mask:?}, latent plane is {latent:?}")]
    MaskShape { mask: (usize, usize), latent: (usize, usize) },
}

fn check(a: &LatentGrid, b: &LatentGrid, mask: &ObjectMask) -> Result<(), MetricsError> {
    a.ensure_shape(b)?;
    let s = a.shape();
    if (mask.height(), mask.width()) != (s.height, s.width) {
        return Err(MetricsError::MaskShape {
            mask: (mask.height(), mask.width()),
            latent: (s.height, s.width),
        });
    }
    Ok(())
}

/// Mean of `f(a, b)` over entries whose pixel has mask bit `select`.
fn masked_mean(
    a: &LatentGrid,
    b: &LatentGrid,
    mask: &ObjectMask,
    select: bool,
    f: impl Fn(f64, f64) -> f64,
) -> Option<f64> {
    let plane = a.shape().plane();
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, (&x, &y)) in a.data().iter().zip(b.data()).enumerate() {
        if mask.bits()[i % plane] == select {
            sum += f(x, y);
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Mean squared difference over background (mask = 0) pixels.
pub fn background_mse(output: &LatentGrid, reference: &LatentGrid, mask: &ObjectMask) -> Result<f64, MetricsError> {
    check(output, reference, mask)?;
    masked_mean(output, reference, mask, false, |x, y| (x - y) * (x - y)).ok_or(MetricsError::NoBackground)
}

/// Mean absolute change over object (mask = 1) pixels.
pub fn masked_divergence(output: &LatentGrid, input: &LatentGrid, mask: &ObjectMask) -> Result<f64, MetricsError> {
    check(output, input, mask)?;
    masked_mean(output, input, mask, true, |x, y| (x - y).abs()).ok_or(MetricsError::EmptyMask)
}

/// `10·log10(peak² / mse)`; `None` when either side is zero.
pub fn psnr(mse: f64, peak: f64) -> Option<f64> {
    (mse > 0.0 && peak > 0.0).then(|| 10.0 * (peak * peak / mse).log10())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    /// Against the reference run.
    pub background_mse: f64,
    /// Peak is the input's dynamic range. `None` for a perfect match.
    pub background_psnr: Option<f64>,
    /// Against the raw input.
    pub background_mse_input: f64,
    /// `None` for an empty mask.
    pub masked_divergence: Option<f64>,
}

impl RegionMetrics {
    pub fn compute(
        output: &LatentGrid,
        reference: &LatentGrid,
        input: &LatentGrid,
        mask: &ObjectMask,
    ) -> Result<Self, MetricsError> {
        let mse = background_mse(output, reference, mask)?;
        let (lo, hi) = input.range();
        let masked_divergence = match masked_divergence(output, input, mask) {
            Ok(v) => Some(v),
            Err(MetricsError::EmptyMask) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            background_mse: mse,
            background_psnr: psnr(mse, hi - lo),
            background_mse_input: background_mse(output, input, mask)?,
            masked_divergence,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::Shape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(seed: u64) -> LatentGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LatentGrid::from_fn(Shape::new(2, 4, 4), |_, _, _| rng.gen_range(-1.0..1.0))
    }

    fn half() -> ObjectMask {
        ObjectMask::from_fn(4, 4, |y, _| y < 2)
    }

    #[test]
    fn background_mse_examples() {
        let a = grid(1);
        assert_eq!(background_mse(&a, &a, &half()).unwrap(), 0.0);
        let shifted = LatentGrid::from_fn(a.shape(), |c, y, x| a.get(c, y, x) + 0.1);
        assert!((background_mse(&shifted, &a, &half()).unwrap() - 0.01).abs() < 1e-12);
        let inside = LatentGrid::from_fn(a.shape(), |c, y, x| a.get(c, y, x) + if y < 2 { 5.0 } else { 0.0 });
        assert_eq!(background_mse(&inside, &a, &half()).unwrap(), 0.0);
        assert_eq!(
            background_mse(&a, &a, &ObjectMask::from_fn(4, 4, |_, _| true)),
            Err(MetricsError::NoBackground)
        );
    }

    #[test]
    fn masked_divergence_examples() {
        let a = grid(2);
        assert_eq!(masked_divergence(&a, &a, &half()).unwrap(), 0.0);
        let bumped = LatentGrid::from_fn(a.shape(), |c, y, x| a.get(c, y, x) + if y < 2 { 1.0 } else { 0.0 });
        assert!((masked_divergence(&bumped, &a, &half()).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(masked_divergence(&a, &a, &ObjectMask::empty(4, 4)), Err(MetricsError::EmptyMask));

        let b = grid(3);
        let mask = half();
        let mut sum = 0.0;
        let mut n = 0;
        for c in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    if mask.get(y, x) {
                        sum += (b.get(c, y, x) - a.get(c, y, x)).abs();
                        n += 1;
                    }
                }
            }
        }
        assert!((masked_divergence(&b, &a, &mask).unwrap() - sum / n as f64).abs() < 1e-15);
    }

    #[test]
    fn mse_ignores_background_order() {
        let (a, b) = (grid(4), grid(5));
        let mask = half();
        // swap two background pixels in both grids
        let swap = |g: &LatentGrid| {
            let mut g = g.clone();
            let (i, j) = (g.index(0, 2, 0), g.index(1, 3, 3));
            g.data_mut().swap(i, j);
            g
        };
        let m1 = background_mse(&a, &b, &mask).unwrap();
        let m2 = background_mse(&swap(&a), &swap(&b), &mask).unwrap();
        assert!((m1 - m2).abs() < 1e-15);
    }

    #[test]
    fn psnr_and_region_metrics() {
        assert_eq!(psnr(0.0, 2.0), None);
        assert!((psnr(0.01, 1.0).unwrap() - 20.0).abs() < 1e-12);
        let a = grid(6);
        let m = RegionMetrics::compute(&a, &a, &a, &ObjectMask::empty(4, 4)).unwrap();
        assert_eq!(m.background_mse, 0.0);
        assert_eq!(m.background_psnr, None);
        assert_eq!(m.masked_divergence, None);
        assert!(matches!(
            background_mse(&a, &a, &ObjectMask::empty(3, 4)),
            Err(MetricsError::MaskShape { .. })
        ));
    }
}
