//! Data-distribution noise predictors and classifier-free guidance.

mod denoiser;
mod mixture;

pub use denoiser::{train_denoiser_dsm, DenoiserConfig, DenoiserModel, DsmConfig, DsmReport};
pub(crate) use mixture::argmax;
pub use mixture::{Component, GaussianMixture};

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::schedule::Schedule;

/// Anything that maps `(x_t, optional class, t)` to a predicted noise vector.
///
/// `class = None` is the unconditional prediction.
pub trait NoisePredictor: Send + Sync {
    fn dim(&self) -> usize;
    fn n_classes(&self) -> usize;
    fn predict_noise(
        &self,
        sched: &Schedule,
        x_t: &[f64],
        t: f64,
        class: Option<usize>,
    ) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSpec {
    pub w: f64,
    pub target_class: Option<usize>,
}

impl GuidanceSpec {
    pub fn unguided(target_class: Option<usize>) -> Self {
        Self {
            w: 0.0,
            target_class,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w.is_finite() && self.w >= 0.0) {
            return Err(Error::config(format!(
                "guidance weight must be finite and >= 0, got {}",
                self.w
            )));
        }
        if self.w > 0.0 && self.target_class.is_none() {
            return Err(Error::config("guidance weight > 0 requires a target class"));
        }
        Ok(())
    }
}

/// Classifier-free guidance: `(w + 1)·cond − w·uncond`.
pub fn guided_noise(cond: &[f64], uncond: &[f64], w: f64) -> Result<Vec<f64>> {
    check_dim(cond.len(), uncond.len())?;
    if !(w.is_finite() && w >= 0.0) {
        return Err(Error::domain(format!("guidance weight {w} must be finite and >= 0")));
    }
    Ok(cond
        .iter()
        .zip(uncond)
        .map(|(c, u)| (w + 1.0) * c - w * u)
        .collect())
}

/// Guided noise prediction `ε^w(x_t, y, t)` for any predictor.
///
/// With `w = 0` only the conditional (or unconditional when no class is set)
/// branch is evaluated.
pub fn guided_prediction(
    predictor: &dyn NoisePredictor,
    sched: &Schedule,
    guidance: &GuidanceSpec,
    x_t: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    let cond = predictor.predict_noise(sched, x_t, t, guidance.target_class)?;
    if guidance.w == 0.0 || guidance.target_class.is_none() {
        return Ok(cond);
    }
    let uncond = predictor.predict_noise(sched, x_t, t, None)?;
    guided_noise(&cond, &uncond, guidance.w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn guided_noise_scalar_arithmetic() {
        assert_eq!(guided_noise(&[2.0], &[1.0], 15.0).unwrap(), vec![17.0]);
    }

    #[test]
    fn guided_noise_w_zero_returns_cond() {
        let c = [0.3, -7.25, 1e-9];
        assert_eq!(guided_noise(&c, &[5.0, 5.0, 5.0], 0.0).unwrap(), c.to_vec());
    }

    #[test]
    fn guided_noise_rejects_mismatch_and_negative_weight() {
        assert!(matches!(
            guided_noise(&[1.0, 2.0], &[1.0], 1.0),
            Err(Error::Shape { .. })
        ));
        assert!(guided_noise(&[1.0], &[1.0], -1.0).is_err());
    }

    #[test]
    fn guidance_spec_requires_target_when_weighted() {
        assert!(GuidanceSpec { w: 2.0, target_class: None }.validate().is_err());
        assert!(GuidanceSpec { w: 0.0, target_class: None }.validate().is_ok());
        assert!(GuidanceSpec { w: f64::NAN, target_class: Some(0) }.validate().is_err());
    }

    proptest! {
        #[test]
        fn guided_noise_cancels_when_branches_agree(
            v in prop::collection::vec(-1e3f64..1e3, 1..8),
            w in 0.0f64..50.0,
        ) {
            let out = guided_noise(&v, &v, w).unwrap();
            for (o, c) in out.iter().zip(&v) {
                prop_assert!((o - c).abs() <= 1e-12 * (1.0 + w) * c.abs().max(1.0));
            }
        }

        #[test]
        fn guided_noise_is_affine(
            pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0, -10.0f64..10.0, -10.0f64..10.0), 1..6),
            w in 0.0f64..20.0,
        ) {
            let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let c: Vec<f64> = pairs.iter().map(|p| p.2).collect();
            let d: Vec<f64> = pairs.iter().map(|p| p.3).collect();
            let lhs: Vec<f64> = guided_noise(&a, &b, w).unwrap().iter()
                .zip(guided_noise(&c, &d, w).unwrap())
                .map(|(x, y)| x + y)
                .collect();
            let ac: Vec<f64> = a.iter().zip(&c).map(|(x, y)| x + y).collect();
            let bd: Vec<f64> = b.iter().zip(&d).map(|(x, y)| x + y).collect();
            let rhs = guided_noise(&ac, &bd, w).unwrap();
            for (l, r) in lhs.iter().zip(&rhs) {
                prop_assert!((l - r).abs() < 1e-9 * (1.0 + w) * 40.0);
            }
        }
    }
}
