//! Variance-preserving diffusion schedule.
//!
//! Linear rate `β(t) = β_min + t(β_max − β_min)` on `t ∈ [0, 1]`, with the
//! signal scale `α(t) = exp(−½∫₀ᵗ β)` taken from the closed-form integral and
//! `σ(t) = √(1 − α(t)²)`.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub beta_min: f64,
    pub beta_max: f64,
    pub t_min: f64,
    pub n_steps: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            beta_min: 0.1,
            beta_max: 20.0,
            t_min: 1e-3,
            n_steps: 1000,
        }
    }
}

impl Schedule {
    pub const T_MAX: f64 = 1.0;

    pub fn new(beta_min: f64, beta_max: f64, t_min: f64, n_steps: usize) -> Result<Self> {
        let s = Self {
            beta_min,
            beta_max,
            t_min,
            n_steps,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta_min > 0.0 && self.beta_min < self.beta_max && self.beta_max.is_finite()) {
            return Err(Error::config(format!(
                "schedule requires 0 < beta_min < beta_max, got beta_min={}, beta_max={}",
                self.beta_min, self.beta_max
            )));
        }
        if !(self.t_min > 0.0 && self.t_min < Self::T_MAX) {
            return Err(Error::config(format!(
                "schedule requires 0 < t_min < 1, got {}",
                self.t_min
            )));
        }
        if self.n_steps == 0 {
            return Err(Error::config("schedule requires n_steps >= 1"));
        }
        Ok(())
    }

    fn check_t(t: f64) -> Result<()> {
        if (0.0..=Self::T_MAX).contains(&t) {
            Ok(())
        } else {
            Err(Error::domain(format!("diffusion time {t} outside [0, 1]")))
        }
    }

    pub fn beta(&self, t: f64) -> Result<f64> {
        Self::check_t(t)?;
        Ok(self.beta_min + t * (self.beta_max - self.beta_min))
    }

    /// `½∫₀ᵗ β(s) ds`, i.e. `−ln α(t)`.
    fn half_integral(&self, t: f64) -> f64 {
        0.25 * t * t * (self.beta_max - self.beta_min) + 0.5 * t * self.beta_min
    }

    pub fn alpha_sigma(&self, t: f64) -> Result<(f64, f64)> {
        Self::check_t(t)?;
        let h = self.half_integral(t);
        let alpha = (-h).exp();
        // 1 − α² via expm1 keeps σ accurate for small t.
        let sigma = (-(-2.0 * h).exp_m1()).sqrt();
        Ok((alpha, sigma))
    }

    pub fn alpha(&self, t: f64) -> Result<f64> {
        Ok(self.alpha_sigma(t)?.0)
    }

    pub fn sigma(&self, t: f64) -> Result<f64> {
        Ok(self.alpha_sigma(t)?.1)
    }

    /// Forward kernel sample `α(t)·x0 + σ(t)·z`.
    pub fn perturb(&self, x0: &[f64], t: f64, z: &[f64]) -> Result<Vec<f64>> {
        check_dim(x0.len(), z.len())?;
        let (a, s) = self.alpha_sigma(t)?;
        Ok(x0.iter().zip(z).map(|(x, n)| a * x + s * n).collect())
    }

    /// Uniform reverse-time grid `1 = t_0 > t_1 > ... > t_n = t_min`.
    pub fn reverse_grid(&self, n_steps: usize) -> Vec<f64> {
        let dt = (Self::T_MAX - self.t_min) / n_steps as f64;
        (0..=n_steps)
            .map(|i| {
                if i == n_steps {
                    self.t_min
                } else {
                    Self::T_MAX - i as f64 * dt
                }
            })
            .collect()
    }
}
