//! Diffused neighborhood scores pulling samples toward a CE center `μ_CE`.
//!
//! Two neighborhoods are supported. The Gaussian one diffuses in closed form
//! to `N(α μ_CE, (α²σ_CE² + σ_t²) I)`. The Boltzmann-inspired one is the
//! Laplace density `b(x) ∝ exp(−√2 |x − μ|/σ_CE)` per coordinate; its diffused
//! score has an exact erfc form and a cheaper hardtanh approximation with
//! slope `γ_t` at the mode.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::schedule::Schedule;
use crate::special::{erfcx, ln_erfcx, SQRT_PI};

/// Above this value of `u` the erfc ratio is continued linearly.
pub const RATIO_SWITCH: f64 = 20.0;

/// Largest `|u ± v|` accepted by [`boltzmann_exact_score_1d`].
const EXACT_ENVELOPE: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Gaussian,
    Boltzmann,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Gaussian => "gaussian",
            Variant::Boltzmann => "boltzmann",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborhoodSpec {
    pub variant: Variant,
    pub mu_ce: Vec<f64>,
    pub sigma_ce: f64,
    /// Guidance weight carried alongside for the composed predictor.
    pub w: f64,
}

impl NeighborhoodSpec {
    pub fn new(variant: Variant, mu_ce: Vec<f64>, sigma_ce: f64, w: f64) -> Result<Self> {
        let s = Self {
            variant,
            mu_ce,
            sigma_ce,
            w,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_ce > 0.0 && self.sigma_ce.is_finite()) {
            return Err(Error::config(format!(
                "sigma_ce must be positive and finite, got {}",
                self.sigma_ce
            )));
        }
        if let Some(i) = self.mu_ce.iter().position(|v| !v.is_finite()) {
            return Err(Error::config(format!("mu_ce[{i}] is not finite")));
        }
        Ok(())
    }

    fn expect(&self, variant: Variant) -> Result<()> {
        if self.variant == variant {
            Ok(())
        } else {
            Err(Error::config(format!(
                "{} neighborhood requested from a {} spec",
                variant.as_str(),
                self.variant.as_str()
            )))
        }
    }
}

/// Per-coordinate quantities of the diffused Boltzmann neighborhood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoltzmannEval {
    /// `x_t − α_t μ_CE`.
    pub y_t: f64,
    /// `σ_t/(α_t σ_CE)`.
    pub u: f64,
    pub gamma_t: f64,
}

impl BoltzmannEval {
    pub fn new(sched: &Schedule, sigma_ce: f64, mu_ce: f64, x: f64, t: f64) -> Result<Self> {
        let (a, s) = positive_time(sched, t)?;
        check_sigma_ce(sigma_ce)?;
        Ok(Self {
            y_t: x - a * mu_ce,
            u: s / (a * sigma_ce),
            gamma_t: gamma(sched, sigma_ce, t)?,
        })
    }
}

fn positive_time(sched: &Schedule, t: f64) -> Result<(f64, f64)> {
    if t <= 0.0 {
        return Err(Error::domain(format!(
            "Boltzmann neighborhood needs t > 0, got {t}"
        )));
    }
    sched.alpha_sigma(t)
}

fn check_sigma_ce(sigma_ce: f64) -> Result<()> {
    if sigma_ce > 0.0 && sigma_ce.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!("sigma_ce must be > 0, got {sigma_ce}")))
    }
}

/// Score of the diffused Gaussian neighborhood,
/// `(α μ_CE − x_t)/(α²σ_CE² + σ_t²)` element-wise.
pub fn gaussian_neighborhood_score(
    sched: &Schedule,
    spec: &NeighborhoodSpec,
    x_t: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    spec.expect(Variant::Gaussian)?;
    check_dim(spec.mu_ce.len(), x_t.len())?;
    let (a, s) = sched.alpha_sigma(t)?;
    let var = a * a * spec.sigma_ce * spec.sigma_ce + s * s;
    Ok(x_t
        .iter()
        .zip(&spec.mu_ce)
        .map(|(x, m)| (a * m - x) / var)
        .collect())
}

/// `exp(−u²)/erfc(u)`, continued as `√π·u + c` from `u = 20` on, with `c`
/// matching the direct value at the switch.
pub fn stable_erfc_ratio(u: f64) -> Result<f64> {
    if !(u >= 0.0) {
        return Err(Error::domain(format!("erfc ratio needs u >= 0, got {u}")));
    }
    if u < RATIO_SWITCH {
        Ok(1.0 / erfcx(u))
    } else {
        Ok(SQRT_PI * u + ratio_offset())
    }
}

fn ratio_offset() -> f64 {
    1.0 / erfcx(RATIO_SWITCH) - SQRT_PI * RATIO_SWITCH
}

/// Slope `γ_t` of the hardtanh argument.
pub fn gamma(sched: &Schedule, sigma_ce: f64, t: f64) -> Result<f64> {
    check_sigma_ce(sigma_ce)?;
    let (a, s) = positive_time(sched, t)?;
    let u = s / (a * sigma_ce);
    let k = std::f64::consts::SQRT_2 / (a * sigma_ce);
    Ok(k - std::f64::consts::SQRT_2 / (s * SQRT_PI) * stable_erfc_ratio(u)?)
}

/// Exact 1D score `∂_x log b_t(x)` of the diffused Boltzmann neighborhood.
///
/// With `v = y_t/(√2 σ_t)` the score is
/// `k·tanh((ln erfcx(u+v) − ln erfcx(u−v))/2)`, `k = √2/(α σ_CE)`.
pub fn boltzmann_exact_score_1d(
    sched: &Schedule,
    sigma_ce: f64,
    mu_ce: f64,
    x: f64,
    t: f64,
) -> Result<f64> {
    check_sigma_ce(sigma_ce)?;
    let (a, s) = positive_time(sched, t)?;
    if !(x.is_finite() && mu_ce.is_finite()) {
        return Err(Error::Range(format!("non-finite input x={x}, mu={mu_ce}")));
    }
    let y = x - a * mu_ce;
    let u = s / (a * sigma_ce);
    let v = y / (std::f64::consts::SQRT_2 * s);
    if (u + v.abs()) > EXACT_ENVELOPE {
        return Err(Error::Range(format!(
            "u = {u}, v = {v} exceed the envelope |u ± v| <= {EXACT_ENVELOPE}"
        )));
    }
    let k = std::f64::consts::SQRT_2 / (a * sigma_ce);
    let score = k * (0.5 * (ln_erfcx(u + v) - ln_erfcx(u - v))).tanh();
    if score.is_finite() {
        Ok(score)
    } else {
        Err(Error::Range(format!("score not finite at u = {u}, v = {v}")))
    }
}

/// Element-wise `k·clamp(γ_t (x_t − α μ_CE), −1, 1)`, `k = √2/(α σ_CE)`.
pub fn boltzmann_approx_score(
    sched: &Schedule,
    spec: &NeighborhoodSpec,
    x_t: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    spec.expect(Variant::Boltzmann)?;
    check_dim(spec.mu_ce.len(), x_t.len())?;
    let g = gamma(sched, spec.sigma_ce, t)?;
    let a = sched.alpha(t)?;
    let k = std::f64::consts::SQRT_2 / (a * spec.sigma_ce);
    Ok(x_t
        .iter()
        .zip(&spec.mu_ce)
        .map(|(x, m)| k * (g * (x - a * m)).clamp(-1.0, 1.0))
        .collect())
}

/// `∂²_x log b_t` at the mode, evaluated through the stable ratio.
pub fn boltzmann_curvature_at_mode(sched: &Schedule, sigma_ce: f64, t: f64) -> Result<f64> {
    let g = gamma(sched, sigma_ce, t)?;
    let a = sched.alpha(t)?;
    Ok(g * std::f64::consts::SQRT_2 / (a * sigma_ce))
}

/// Neighborhood score for whichever variant `spec` names.
pub fn neighborhood_score(
    sched: &Schedule,
    spec: &NeighborhoodSpec,
    x_t: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    match spec.variant {
        Variant::Gaussian => gaussian_neighborhood_score(sched, spec, x_t, t),
        Variant::Boltzmann => boltzmann_approx_score(sched, spec, x_t, t),
    }
}

/// Term added to the guided noise prediction: the negated neighborhood
/// score, multiplied by `σ_t` only when `sigma_t_scaling` is set.
pub fn neighborhood_noise_term(
    sched: &Schedule,
    spec: &NeighborhoodSpec,
    x_t: &[f64],
    t: f64,
    sigma_t_scaling: bool,
) -> Result<Vec<f64>> {
    let score = neighborhood_score(sched, spec, x_t, t)?;
    let scale = if sigma_t_scaling { sched.sigma(t)? } else { 1.0 };
    Ok(score.into_iter().map(|s| -scale * s).collect())
}
