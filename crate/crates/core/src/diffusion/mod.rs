//! Noise schedule, forward noising, the noise-prediction loss and samplers.

pub mod sampler;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use crate::latent::LatentTensor;
pub use sampler::{guided_noise, SamplerConfig, SamplerMethod, SamplerSession};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub num_train_timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            num_train_timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

/// Per-timestep variances and their cumulative signal retention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub num_train_timesteps: usize,
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::from_config(&ScheduleConfig::default()).expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    /// Builds a schedule from explicit betas, each strictly inside (0, 1).
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::invalid("schedule needs at least one timestep"));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::invalid(format!("beta {b} outside (0, 1)")));
        }
        let mut acc = 1.0;
        let alpha_bar = beta
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self {
            num_train_timesteps: beta.len(),
            beta,
            alpha_bar,
        })
    }

    /// Betas evenly spaced from `beta_start` to `beta_end`.
    pub fn linear(num_train_timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if num_train_timesteps == 0 {
            return Err(Error::invalid("num_train_timesteps must be positive"));
        }
        let n = num_train_timesteps;
        let beta = (0..n)
            .map(|i| {
                if n == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (n - 1) as f64
                }
            })
            .collect();
        Self::from_betas(beta)
    }

    pub fn from_config(c: &ScheduleConfig) -> Result<Self> {
        Self::linear(c.num_train_timesteps, c.beta_start, c.beta_end)
    }

    /// Signal retention at `t`, with `t < 0` meaning the clean end (1.0).
    pub fn alpha_bar_at(&self, t: i64) -> f64 {
        if t < 0 {
            1.0
        } else {
            self.alpha_bar[t as usize]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.num_train_timesteps {
            return Err(Error::invalid(format!(
                "timestep {t} outside 0..{}",
                self.num_train_timesteps
            )));
        }
        Ok(())
    }
}

/// Standard-normal latent of the given `(channels, h, w)` shape.
pub fn sample_noise<R: Rng>(shape: (usize, usize, usize), rng: &mut R) -> Result<LatentTensor> {
    let (c, h, w) = shape;
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::invalid(format!("noise shape {shape:?} has a zero dimension")));
    }
    let data = (0..c * h * w).map(|_| rng.sample(StandardNormal)).collect();
    LatentTensor::new(c, h, w, data)
}

/// `sqrt(ᾱ_t)·latent + sqrt(1 − ᾱ_t)·noise`.
pub fn add_noise(latent: &LatentTensor, noise: &LatentTensor, t: usize, schedule: &NoiseSchedule) -> Result<LatentTensor> {
    latent.check_same_shape(noise)?;
    schedule.check_t(t)?;
    let ab = schedule.alpha_bar[t];
    Ok(latent.lincomb(ab.sqrt(), noise, (1.0 - ab).sqrt()))
}

/// Mean squared error between predicted and true noise over every entry.
pub fn training_loss(predicted: &LatentTensor, true_noise: &LatentTensor) -> Result<f64> {
    predicted.check_same_shape(true_noise)?;
    let n = predicted.len() as f64;
    Ok(predicted
        .data
        .iter()
        .zip(&true_noise.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}
