use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::NoisePredictor;
use crate::error::{check_dim, Error, Result};
use crate::schedule::Schedule;

/// One diagonal-covariance Gaussian component tagged with its class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub class: usize,
}

/// Class-conditional Gaussian mixture with exactly known diffused scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    components: Vec<Component>,
    n_classes: usize,
}

/// Weighted log-sum-exp responsibilities over the selected components.
struct Responsibilities {
    idx: Vec<usize>,
    resp: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(components: Vec<Component>, n_classes: usize) -> Result<Self> {
        let gm = Self {
            components,
            n_classes,
        };
        gm.validate()?;
        Ok(gm)
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.components.is_empty() {
            errs.push("mixture has no components".to_string());
        }
        if self.n_classes == 0 {
            errs.push("mixture n_classes must be positive".to_string());
        }
        let dim = self.components.first().map_or(0, |c| c.mean.len());
        if dim == 0 && !self.components.is_empty() {
            errs.push("mixture components must have positive dimension".to_string());
        }
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        if !self.components.is_empty() && (total - 1.0).abs() > 1e-12 {
            errs.push(format!("mixture weights sum to {total}, expected 1"));
        }
        for (k, c) in self.components.iter().enumerate() {
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                errs.push(format!("component {k}: weight {} must be positive", c.weight));
            }
            if c.mean.len() != dim || c.var.len() != dim {
                errs.push(format!(
                    "component {k}: mean/var lengths {}/{} differ from dimension {dim}",
                    c.mean.len(),
                    c.var.len()
                ));
            }
            if c.var.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                errs.push(format!("component {k}: covariance entries must be positive"));
            }
            if c.mean.iter().any(|m| !m.is_finite()) {
                errs.push(format!("component {k}: mean must be finite"));
            }
            if c.class >= self.n_classes {
                errs.push(format!(
                    "component {k}: class {} outside [0, {})",
                    c.class, self.n_classes
                ));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigList(errs))
        }
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Responsibilities of the diffused components at `(x, alpha, sigma²)`,
    /// restricted to `class_filter` when set.
    fn responsibilities(
        &self,
        x: &[f64],
        alpha: f64,
        sigma2: f64,
        class_filter: Option<usize>,
    ) -> Result<Responsibilities> {
        check_dim(self.dim(), x.len())?;
        let idx: Vec<usize> = self
            .components
            .iter()
            .enumerate()
            .filter(|(_, c)| class_filter.is_none_or(|y| c.class == y))
            .map(|(k, _)| k)
            .collect();
        if idx.is_empty() {
            return Err(Error::config(format!(
                "no mixture component has class {}",
                class_filter.unwrap_or_default()
            )));
        }
        let mut logw: Vec<f64> = idx
            .iter()
            .map(|&k| {
                let c = &self.components[k];
                let quad: f64 = x
                    .iter()
                    .zip(&c.mean)
                    .zip(&c.var)
                    .map(|((xi, m), v)| {
                        let var = alpha * alpha * v + sigma2;
                        let d = xi - alpha * m;
                        d * d / var + var.ln()
                    })
                    .sum();
                c.weight.ln() - 0.5 * quad
            })
            .collect();
        let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for lw in &mut logw {
            *lw = (*lw - max).exp();
            total += *lw;
        }
        for lw in &mut logw {
            *lw /= total;
        }
        Ok(Responsibilities { idx, resp: logw })
    }

    /// `∇ log p_t(x_t)` of the diffused mixture, optionally restricted to the
    /// components of one class (weights renormalized over that class).
    pub fn diffused_score(
        &self,
        sched: &Schedule,
        x_t: &[f64],
        t: f64,
        class_filter: Option<usize>,
    ) -> Result<Vec<f64>> {
        let (alpha, sigma) = sched.alpha_sigma(t)?;
        let sigma2 = sigma * sigma;
        let r = self.responsibilities(x_t, alpha, sigma2, class_filter)?;
        let mut score = vec![0.0; x_t.len()];
        for (&k, &rk) in r.idx.iter().zip(&r.resp) {
            let c = &self.components[k];
            for (i, s) in score.iter_mut().enumerate() {
                let var = alpha * alpha * c.var[i] + sigma2;
                *s += rk * (alpha * c.mean[i] - x_t[i]) / var;
            }
        }
        Ok(score)
    }

    /// `−σ(t)·∇ log p_t(x_t)`; defined for `t ≥ t_min` only.
    pub fn noise_prediction(
        &self,
        sched: &Schedule,
        x_t: &[f64],
        t: f64,
        class_filter: Option<usize>,
    ) -> Result<Vec<f64>> {
        if t < sched.t_min {
            return Err(Error::domain(format!(
                "noise prediction requires t >= t_min = {}, got {t}",
                sched.t_min
            )));
        }
        let sigma = sched.sigma(t)?;
        let mut s = self.diffused_score(sched, x_t, t, class_filter)?;
        for v in &mut s {
            *v *= -sigma;
        }
        Ok(s)
    }

    /// Exact class posterior `P(y | x)` of the clean (t = 0) mixture.
    pub fn bayes_posterior(&self, x: &[f64]) -> Result<Vec<f64>> {
        let r = self.responsibilities(x, 1.0, 0.0, None)?;
        let mut post = vec![0.0; self.n_classes];
        for (&k, &rk) in r.idx.iter().zip(&r.resp) {
            post[self.components[k].class] += rk;
        }
        Ok(post)
    }

    /// Bayes-optimal class (lowest index on ties).
    pub fn bayes_class(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.bayes_posterior(x)?))
    }

    /// Prior probability of each class.
    pub fn class_priors(&self) -> Vec<f64> {
        let mut p = vec![0.0; self.n_classes];
        for c in &self.components {
            p[c.class] += c.weight;
        }
        p
    }

    /// Draw one labeled point from the clean mixture.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, usize) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = self.components.len() - 1;
        for (k, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                chosen = k;
                break;
            }
        }
        let c = &self.components[chosen];
        let x = c
            .mean
            .iter()
            .zip(&c.var)
            .map(|(m, v)| {
                let z: f64 = StandardNormal.sample(rng);
                m + v.sqrt() * z
            })
            .collect();
        (x, c.class)
    }

    /// Draw one point of a given class.
    pub fn sample_class<R: Rng + ?Sized>(&self, rng: &mut R, class: usize) -> Result<Vec<f64>> {
        let members: Vec<&Component> = self.components.iter().filter(|c| c.class == class).collect();
        if members.is_empty() {
            return Err(Error::config(format!("no mixture component has class {class}")));
        }
        let total: f64 = members.iter().map(|c| c.weight).sum();
        let u: f64 = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut chosen = members[members.len() - 1];
        for c in &members {
            acc += c.weight;
            if u < acc {
                chosen = c;
                break;
            }
        }
        Ok(chosen
            .mean
            .iter()
            .zip(&chosen.var)
            .map(|(m, v)| {
                let z: f64 = StandardNormal.sample(rng);
                m + v.sqrt() * z
            })
            .collect())
    }
}

impl NoisePredictor for GaussianMixture {
    fn dim(&self) -> usize {
        GaussianMixture::dim(self)
    }

    fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn predict_noise(
        &self,
        sched: &Schedule,
        x_t: &[f64],
        t: f64,
        class: Option<usize>,
    ) -> Result<Vec<f64>> {
        self.noise_prediction(sched, x_t, t, class)
    }
}

/// Index of the largest entry, lowest index on ties.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
