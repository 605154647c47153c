//! Variance-preserving SDE: schedule, Gaussian transition kernel and the
//! denoising score-matching objective.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::rng::{standard_normal, SeedStream};
use crate::score::ScoreModel;

pub const T_MIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
    /// Smallest time at which a score is evaluated or trained.
    pub t_min: f64,
    /// Number of grid points.
    pub n_steps: usize,
    /// DDIM stochasticity in [0, 1].
    pub eta: f64,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self { beta_min: 0.1, beta_max: 10.0, t_min: T_MIN, n_steps: 100, eta: 0.0 }
    }
}

impl DiffusionSchedule {
    pub fn with_steps(mut self, n_steps: usize) -> Self {
        self.n_steps = n_steps;
        self
    }

    pub fn with_eta(mut self, eta: f64) -> Self {
        self.eta = eta;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta_min > 0.0 && self.beta_max > self.beta_min) {
            return Err(Error::Config(format!(
                "need 0 < beta_min < beta_max, got {} and {}",
                self.beta_min, self.beta_max
            )));
        }
        if !(self.t_min > 0.0 && self.t_min < 1.0) {
            return Err(Error::Config(format!("t_min must lie in (0, 1), got {}", self.t_min)));
        }
        if self.n_steps < 2 {
            return Err(Error::Config(format!("need at least 2 time steps, got {}", self.n_steps)));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!("eta must lie in [0, 1], got {}", self.eta)));
        }
        Ok(())
    }

    pub fn beta(&self, t: f64) -> f64 {
        self.beta_min + t * (self.beta_max - self.beta_min)
    }

    /// `∫₀ᵗ β(s) ds`.
    pub fn integral(&self, t: f64) -> f64 {
        self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t
    }

    fn check_t(t: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidValue(format!("diffusion time {t} outside [0, 1]")));
        }
        Ok(())
    }

    /// `(γ_t, ν_t)` of the kernel `x_t ~ N(γ_t x₀, ν_t² I)`.
    pub fn coeffs(&self, t: f64) -> Result<(f64, f64)> {
        Self::check_t(t)?;
        let i = self.integral(t);
        Ok(((-0.5 * i).exp(), (-(-i).exp_m1()).sqrt()))
    }

    /// Coefficients of the kernel from time `s` to a later time `t`.
    pub fn transition(&self, s: f64, t: f64) -> Result<(f64, f64)> {
        Self::check_t(s)?;
        Self::check_t(t)?;
        if s > t {
            return Err(Error::InvalidValue(format!("transition needs s <= t, got {s} > {t}")));
        }
        let i = self.integral(t) - self.integral(s);
        Ok(((-0.5 * i).exp(), (-(-i).exp_m1()).sqrt()))
    }

    /// Uniform grid `0 = t_1 < … < t_N = 1` used by DDIM-type samplers.
    /// The score is only evaluated from `t_2` upwards.
    pub fn ddim_grid(&self) -> Vec<f64> {
        let n = self.n_steps;
        (0..n).map(|k| if k + 1 == n { 1.0 } else { k as f64 / (n - 1) as f64 }).collect()
    }

    /// Uniform grid from `t_min` to 1 with `n_steps` intervals, used by
    /// Euler–Maruyama samplers.
    pub fn em_grid(&self) -> Vec<f64> {
        let n = self.n_steps;
        (0..=n).map(|k| if k == n { 1.0 } else { self.t_min + (1.0 - self.t_min) * k as f64 / n as f64 }).collect()
    }
}

pub fn kernel_coeffs(sched: &DiffusionSchedule, t: f64) -> Result<(f64, f64)> {
    sched.coeffs(t)
}

/// `x_t = γ_t x₀ + ν_t z`.
pub fn perturb(sched: &DiffusionSchedule, x0: &ImageGrid, t: f64, z: &ImageGrid) -> Result<ImageGrid> {
    x0.check_same_dims(z)?;
    let (g, n) = sched.coeffs(t)?;
    Ok(x0.zip_map(z, |a, b| g * a + n * b))
}

/// Score of the kernel, `−(x_t − γ_t x₀)/ν_t²`.
pub fn dsm_target(sched: &DiffusionSchedule, x0: &ImageGrid, xt: &ImageGrid, t: f64) -> Result<ImageGrid> {
    x0.check_same_dims(xt)?;
    let (g, n) = sched.coeffs(t)?;
    if n == 0.0 {
        return Err(Error::InvalidValue("score-matching target is unbounded at t = 0".into()));
    }
    let v = n * n;
    Ok(xt.zip_map(x0, |a, b| -(a - g * b) / v))
}

/// Monte Carlo estimate of `E ν_t² ‖s(x_t, t) + z/ν_t‖²` with
/// `t ~ U[t_min, 1]`, cycling through `batch` for `n_draws` draws.
pub fn dsm_loss(model: &dyn ScoreModel, batch: &[ImageGrid], sched: &DiffusionSchedule, n_draws: usize, seed: u64) -> Result<f64> {
    if batch.is_empty() || n_draws == 0 {
        return Err(Error::InvalidValue("score-matching loss needs a non-empty batch and draws".into()));
    }
    let stream = SeedStream::new(seed);
    let mut total = 0.0;
    for d in 0..n_draws {
        let x0 = &batch[d % batch.len()];
        let mut rng = stream.rng("dsm", d as u64);
        let t = sched.t_min + (1.0 - sched.t_min) * rng.random::<f64>();
        let z = x0.like(standard_normal(&mut rng, x0.len()));
        let xt = perturb(sched, x0, t, &z)?;
        let (_, nu) = sched.coeffs(t)?;
        let s = model.evaluate(&xt, t, None)?;
        total += s.data().iter().zip(z.data()).map(|(a, b)| (nu * a + b).powi(2)).sum::<f64>();
    }
    Ok(total / n_draws as f64)
}
