//! Euler–Maruyama integration of the reverse-time VP SDE.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};
use crate::neighborhood::{neighborhood_noise_term, NeighborhoodSpec, Variant};
use crate::schedule::Schedule;
use crate::score::{guided_prediction, GuidanceSpec, NoisePredictor};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub t_min: f64,
    pub seed: u64,
    /// Applied to the final sample only.
    pub clip: Option<(f64, f64)>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_steps: 1000,
            t_min: 1e-3,
            seed: 0,
            clip: None,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::config("sampler n_steps must be >= 1"));
        }
        if !(self.t_min > 0.0 && self.t_min < 1.0) {
            return Err(Error::config(format!(
                "sampler t_min must lie in (0, 1), got {}",
                self.t_min
            )));
        }
        if let Some((lo, hi)) = self.clip {
            if !(lo < hi) {
                return Err(Error::config(format!("empty clip range ({lo}, {hi})")));
            }
        }
        Ok(())
    }

    /// Uniform grid `1 = t_0 > ... > t_n = t_min`.
    pub fn grid(&self) -> Vec<f64> {
        let dt = (1.0 - self.t_min) / self.n_steps as f64;
        (0..=self.n_steps)
            .map(|i| {
                if i == self.n_steps {
                    self.t_min
                } else {
                    1.0 - i as f64 * dt
                }
            })
            .collect()
    }
}

/// Data predictor, guidance, and an optional neighborhood, composed into one
/// score.
#[derive(Clone, Copy)]
pub struct ComposedPredictor<'a> {
    pub data: &'a dyn NoisePredictor,
    pub guidance: GuidanceSpec,
    pub neighborhood: Option<&'a NeighborhoodSpec>,
    /// Multiply the neighborhood term by `σ_t` before adding it to the noise
    /// prediction.
    pub sigma_t_scaling: bool,
}

/// The two additive pieces of the composed score at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreParts {
    pub data_guided: Vec<f64>,
    pub neighborhood: Vec<f64>,
    pub total: Vec<f64>,
}

impl<'a> ComposedPredictor<'a> {
    pub fn new(
        data: &'a dyn NoisePredictor,
        guidance: GuidanceSpec,
        neighborhood: Option<&'a NeighborhoodSpec>,
        sigma_t_scaling: bool,
    ) -> Result<Self> {
        guidance.validate()?;
        if let Some(c) = guidance.target_class {
            if c >= data.n_classes() {
                return Err(Error::config(format!(
                    "target class {c} outside [0, {})",
                    data.n_classes()
                )));
            }
        }
        if let Some(n) = neighborhood {
            n.validate()?;
            check_dim(data.dim(), n.mu_ce.len())?;
        }
        Ok(Self {
            data,
            guidance,
            neighborhood,
            sigma_t_scaling,
        })
    }

    /// Composed noise prediction `ε^w + (neighborhood term)` converted to a
    /// score by `−ε/σ_t`, kept split into its two summands.
    pub fn score_parts(&self, sched: &Schedule, x_t: &[f64], t: f64) -> Result<ScoreParts> {
        let sigma = sched.sigma(t)?;
        let eps = guided_prediction(self.data, sched, &self.guidance, x_t, t)?;
        let data_guided: Vec<f64> = eps.iter().map(|e| -e / sigma).collect();
        let neighborhood = match self.neighborhood {
            Some(spec) => neighborhood_noise_term(sched, spec, x_t, t, self.sigma_t_scaling)?
                .into_iter()
                .map(|e| -e / sigma)
                .collect(),
            None => vec![0.0; x_t.len()],
        };
        let total = data_guided
            .iter()
            .zip(&neighborhood)
            .map(|(a, b)| a + b)
            .collect();
        Ok(ScoreParts {
            data_guided,
            neighborhood,
            total,
        })
    }

    pub fn score(&self, sched: &Schedule, x_t: &[f64], t: f64) -> Result<Vec<f64>> {
        Ok(self.score_parts(sched, x_t, t)?.total)
    }
}

/// One reverse step `x + [½β x + β s] dt + √(β dt) z`.
pub fn em_reverse_step(
    sched: &Schedule,
    x_t: &[f64],
    t: f64,
    dt: f64,
    score: &[f64],
    z: &[f64],
) -> Result<Vec<f64>> {
    check_dim(x_t.len(), score.len())?;
    check_dim(x_t.len(), z.len())?;
    if !(dt > 0.0) {
        return Err(Error::domain(format!("step size must be positive, got {dt}")));
    }
    check_finite(x_t)?;
    check_finite(score)?;
    check_finite(z)?;
    let b = sched.beta(t)?;
    let noise = (b * dt).sqrt();
    let out: Vec<f64> = x_t
        .iter()
        .zip(score)
        .zip(z)
        .map(|((x, s), n)| x + (0.5 * b * x + b * s) * dt + noise * n)
        .collect();
    check_finite(&out)?;
    Ok(out)
}

/// Integrates one trajectory with its own seed.
pub fn sample_one(
    sched: &Schedule,
    cfg: &SamplerConfig,
    predictor: &ComposedPredictor<'_>,
    seed: u64,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let d = predictor.data.dim();
    let mut rng = seed::rng(seed);
    let mut x: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let grid = cfg.grid();
    for (step, w) in grid.windows(2).enumerate() {
        let (t, next) = (w[0], w[1]);
        let wrap = |e: Error| Error::Sampling {
            step,
            t,
            source: Box::new(e),
        };
        let score = predictor.score(sched, &x, t).map_err(wrap)?;
        let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        x = em_reverse_step(sched, &x, t, t - next, &score, &z).map_err(wrap)?;
    }
    if let Some((lo, hi)) = cfg.clip {
        for v in &mut x {
            *v = v.clamp(lo, hi);
        }
    }
    Ok(x)
}

/// Draws `batch` samples; element `i` uses the seed stream `i` of
/// `cfg.seed`, so the result does not depend on the thread count.
pub fn sample(
    sched: &Schedule,
    cfg: &SamplerConfig,
    predictor: &ComposedPredictor<'_>,
    batch: usize,
) -> Result<Vec<Vec<f64>>> {
    (0..batch)
        .into_par_iter()
        .map(|i| sample_one(sched, cfg, predictor, seed::derive_seed(cfg.seed, i as u64)))
        .collect()
}

/// CE generation settings shared by every record of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CeParams {
    pub variant: Variant,
    pub w: f64,
    pub sigma_ce: f64,
    pub sigma_t_scaling: bool,
}

/// Samples one CE for `x` toward class `y_ce` with `μ_CE = x`, using the
/// trajectory seed `seed`.
pub fn generate_ce(
    sched: &Schedule,
    cfg: &SamplerConfig,
    data: &dyn NoisePredictor,
    x: &[f64],
    y_ce: usize,
    params: &CeParams,
    seed: u64,
) -> Result<Vec<f64>> {
    check_finite(x)?;
    let spec = NeighborhoodSpec::new(params.variant, x.to_vec(), params.sigma_ce, params.w)?;
    let guidance = GuidanceSpec {
        w: params.w,
        target_class: Some(y_ce),
    };
    let pred = ComposedPredictor::new(data, guidance, Some(&spec), params.sigma_t_scaling)?;
    sample_one(sched, cfg, &pred, seed)
}
