//! Mask-gated guidance between the edited and the inversion-branch noise
//! predictions.
//!
//! Outside the mask the edited prediction `ε_c` passes through untouched.
//! Inside it the result is `α·ε_c + (1 − α)·ε_u`, which for `α > 1` pushes
//! the masked latents away from the original trajectory.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::latent::{LatentError, LatentGrid};
use crate::masking::ObjectMask;

pub const DEFAULT_ALPHA: f64 = 1.3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GuidanceError {
    #[error(transparent)]
    Latent(#[from] LatentError),
    #[error("mask is {mask:?}, latent plane is {latent:?}")]
    MaskShape { mask: (usize, usize), latent: (usize, usize) },
    #[error("guidance weight must be finite, got {0}")]
    NonFinite(f64),
}

/// α per denoising step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum GuidanceSchedule {
    Constant { alpha: f64 },
    /// `start` at `t = T`, `end` at `t = 1`.
    Linear { start: f64, end: f64 },
}

impl Default for GuidanceSchedule {
    fn default() -> Self {
        GuidanceSchedule::Constant { alpha: DEFAULT_ALPHA }
    }
}

impl GuidanceSchedule {
    pub fn validate(&self) -> Result<(), GuidanceError> {
        let values = match *self {
            GuidanceSchedule::Constant { alpha } => [alpha, alpha],
            GuidanceSchedule::Linear { start, end } => [start, end],
        };
        match values.into_iter().find(|v| !v.is_finite()) {
            Some(bad) => Err(GuidanceError::NonFinite(bad)),
            None => Ok(()),
        }
    }
}

pub fn alpha_at(sched: &GuidanceSchedule, t: usize, steps: usize) -> f64 {
    match *sched {
        GuidanceSchedule::Constant { alpha } => alpha,
        GuidanceSchedule::Linear { start, end } => {
            if steps <= 1 {
                return start;
            }
            start + (end - start) * (steps - t) as f64 / (steps - 1) as f64
        }
    }
}

/// `ε_c` from the edited branch, `ε_u` from the inversion branch.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePair {
    pub eps_c: LatentGrid,
    pub eps_u: LatentGrid,
}

impl NoisePair {
    pub fn new(eps_c: LatentGrid, eps_u: LatentGrid) -> Result<Self, GuidanceError> {
        eps_c.ensure_shape(&eps_u)?;
        Ok(Self { eps_c, eps_u })
    }
}

/// `(1 − M)⊙ε_c + M⊙[α·ε_c + (1 − α)·ε_u]`, with `M` broadcast over channels.
pub fn ladg_blend(pair: &NoisePair, mask: &ObjectMask, alpha: f64) -> Result<LatentGrid, GuidanceError> {
    if !alpha.is_finite() {
        return Err(GuidanceError::NonFinite(alpha));
    }
    let shape = pair.eps_c.shape();
    pair.eps_c.ensure_shape(&pair.eps_u)?;
    if (mask.height(), mask.width()) != (shape.height, shape.width) {
        return Err(GuidanceError::MaskShape {
            mask: (mask.height(), mask.width()),
            latent: (shape.height, shape.width),
        });
    }
    let mut out = pair.eps_c.clone();
    // α = 1 collapses to ε_c exactly, signed zeros included.
    if alpha == 1.0 {
        return Ok(out);
    }
    let plane = shape.plane();
    let (c, u) = (pair.eps_c.data(), pair.eps_u.data());
    for (idx, v) in out.data_mut().iter_mut().enumerate() {
        if mask.bits()[idx % plane] {
            *v = alpha * c[idx] + (1.0 - alpha) * u[idx];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::Shape;
    use proptest::prelude::*;

    #[test]
    fn alpha_schedule_examples() {
        let c = GuidanceSchedule::Constant { alpha: 1.3 };
        assert_eq!(alpha_at(&c, 1, 50), 1.3);
        assert_eq!(alpha_at(&c, 50, 50), 1.3);
        let l = GuidanceSchedule::Linear { start: 1.6, end: 1.0 };
        assert_eq!(alpha_at(&l, 50, 50), 1.6);
        assert_eq!(alpha_at(&l, 1, 50), 1.0);
        let want = 1.6 + (1.0 - 1.6) * (50.0 - 25.0) / (50.0 - 1.0);
        assert!((alpha_at(&l, 25, 50) - want).abs() < 1e-15);
        assert!((alpha_at(&l, 25, 50) - 1.293878).abs() < 1e-6);
        assert_eq!(GuidanceSchedule::default(), GuidanceSchedule::Constant { alpha: 1.3 });
        assert!(GuidanceSchedule::Constant { alpha: f64::NAN }.validate().is_err());
    }

    fn pair(c: f64, u: f64) -> NoisePair {
        let s = Shape::new(2, 2, 2);
        NoisePair::new(LatentGrid::new(s, vec![c; 8]).unwrap(), LatentGrid::new(s, vec![u; 8]).unwrap()).unwrap()
    }

    #[test]
    fn blend_examples() {
        let inside = ObjectMask::from_fn(2, 2, |y, x| y == 0 && x == 1);
        let p = pair(0.4, 0.2);
        assert_eq!(ladg_blend(&p, &inside, 1.0).unwrap(), p.eps_c);
        assert_eq!(ladg_blend(&p, &ObjectMask::empty(2, 2), 1.5).unwrap(), p.eps_c);
        let out = ladg_blend(&p, &inside, 1.5).unwrap();
        for c in 0..2 {
            assert!((out.get(c, 0, 1) - 0.5).abs() < 1e-15);
            assert_eq!(out.get(c, 0, 0), 0.4);
            assert_eq!(out.get(c, 1, 1), 0.4);
        }
    }

    #[test]
    fn blend_rejects_mismatches() {
        let p = pair(0.0, 0.0);
        assert!(matches!(ladg_blend(&p, &ObjectMask::empty(3, 2), 1.2), Err(GuidanceError::MaskShape { .. })));
        assert!(ladg_blend(&p, &ObjectMask::empty(2, 2), f64::INFINITY).is_err());
        let other = LatentGrid::zeros(Shape::new(1, 2, 2));
        assert!(NoisePair::new(p.eps_c.clone(), other).is_err());
    }

    fn grids() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<bool>)> {
        (
            prop::collection::vec(-3.0..3.0f64, 3 * 16),
            prop::collection::vec(-3.0..3.0f64, 3 * 16),
            prop::collection::vec(any::<bool>(), 16),
        )
    }

    proptest! {
        #[test]
        fn outside_mask_is_eps_c((c, u, bits) in grids(), alpha in 0.5..2.0f64) {
            let s = Shape::new(3, 4, 4);
            let p = NoisePair::new(LatentGrid::new(s, c).unwrap(), LatentGrid::new(s, u).unwrap()).unwrap();
            let mask = ObjectMask::new(4, 4, bits).unwrap();
            let out = ladg_blend(&p, &mask, alpha).unwrap();
            for (i, v) in out.data().iter().enumerate() {
                if !mask.bits()[i % 16] {
                    prop_assert_eq!(v.to_bits(), p.eps_c.data()[i].to_bits());
                }
            }
        }

        #[test]
        fn equal_predictions_are_fixed_points(c in prop::collection::vec(-3.0..3.0f64, 16), alpha in 0.0..3.0f64) {
            let s = Shape::new(1, 4, 4);
            let g = LatentGrid::new(s, c).unwrap();
            let p = NoisePair::new(g.clone(), g.clone()).unwrap();
            let out = ladg_blend(&p, &ObjectMask::from_fn(4, 4, |_, _| true), alpha).unwrap();
            for (a, b) in out.data().iter().zip(g.data()) {
                prop_assert!((a - b).abs() <= 1e-14);
            }
        }
    }
}
