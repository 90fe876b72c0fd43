//! Reverse-process samplers: ancestral (DDPM posterior) and PNDM.
//!
//! A [`SamplerSession`] walks a fixed plan of model evaluations. Each plan
//! step names the timestep at which the caller must evaluate the noise model,
//! then [`SamplerSession::step`] consumes that prediction.

use serde::{Deserialize, Serialize};

use super::{sample_noise, LatentTensor, NoiseSchedule};
use crate::data::corpus::record_rng;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMethod {
    Ancestral,
    Pndm,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub method: SamplerMethod,
    pub num_inference_steps: usize,
    pub guidance_scale: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            method: SamplerMethod::Pndm,
            num_inference_steps: 50,
            guidance_scale: 4.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.num_inference_steps == 0 || self.num_inference_steps > schedule.num_train_timesteps {
            return Err(Error::invalid(format!(
                "num_inference_steps {} outside 1..={}",
                self.num_inference_steps, schedule.num_train_timesteps
            )));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::invalid(format!("guidance_scale {} must be finite and nonnegative", self.guidance_scale)));
        }
        Ok(())
    }
}

/// Classifier-free guidance: `ε_u + s·(ε_c − ε_u)`. For `s == 1` the
/// conditional prediction is returned unchanged.
pub fn guided_noise(cond: &LatentTensor, uncond: &LatentTensor, scale: f64) -> LatentTensor {
    if scale == 1.0 {
        return cond.clone();
    }
    uncond.lincomb(1.0 - scale, cond, scale)
}

/// Inference timesteps, descending: `(n-1)·r, …, r, 0` with `r = T / n`.
pub fn inference_timesteps(num_train_timesteps: usize, n: usize) -> Vec<i64> {
    let r = (num_train_timesteps / n) as i64;
    (0..n as i64).rev().map(|i| i * r).collect()
}

/// Deterministic transfer of a sample from `t` to `t_prev` along the
/// predicted-noise direction (the pseudo-numerical update).
pub fn pndm_transfer(x: &LatentTensor, eps: &LatentTensor, t: i64, t_prev: i64, schedule: &NoiseSchedule) -> LatentTensor {
    let ab = schedule.alpha_bar_at(t);
    let ab_prev = schedule.alpha_bar_at(t_prev);
    let sample_coeff = (ab_prev / ab).sqrt();
    let denom = ab * (1.0 - ab_prev).sqrt() + (ab * (1.0 - ab) * ab_prev).sqrt();
    x.lincomb(sample_coeff, eps, -(ab_prev - ab) / denom)
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum PlanStep {
    Ancestral { t: i64, t_prev: i64 },
    /// Sub-evaluation `sub` (0..4) of a Runge-Kutta warm-up step from `t`.
    Prk { sub: usize, t: i64, half: i64, full: i64 },
    Plms { t: i64, t_prev: i64 },
}

#[derive(Clone, Debug, Default)]
struct PndmState {
    ets: Vec<LatentTensor>,
    cur_sample: Option<LatentTensor>,
    acc: Option<LatentTensor>,
}

/// Per-generation sampler state for a batch of samples.
#[derive(Clone, Debug)]
pub struct SamplerSession {
    pub config: SamplerConfig,
    schedule: NoiseSchedule,
    seeds: Vec<u64>,
    plan: Vec<PlanStep>,
    next: usize,
    pndm: Vec<PndmState>,
}

impl SamplerSession {
    /// One session drives `seeds.len()` samples; sample `b` draws its noise from `seeds[b]`.
    pub fn new(config: SamplerConfig, schedule: &NoiseSchedule, seeds: Vec<u64>) -> Result<Self> {
        config.validate(schedule)?;
        let ts = inference_timesteps(schedule.num_train_timesteps, config.num_inference_steps);
        let r = (schedule.num_train_timesteps / config.num_inference_steps) as i64;
        let mut plan = Vec::new();
        match config.method {
            SamplerMethod::Ancestral => {
                plan.extend(ts.iter().map(|&t| PlanStep::Ancestral { t, t_prev: t - r }));
            }
            SamplerMethod::Pndm => {
                for (i, &t) in ts.iter().enumerate() {
                    if i < 3 {
                        for sub in 0..4 {
                            plan.push(PlanStep::Prk { sub, t, half: r / 2, full: r });
                        }
                    } else {
                        plan.push(PlanStep::Plms { t, t_prev: t - r });
                    }
                }
            }
        }
        Ok(Self {
            config,
            schedule: schedule.clone(),
            pndm: vec![PndmState::default(); seeds.len()],
            seeds,
            plan,
            next: 0,
        })
    }

    pub fn batch(&self) -> usize {
        self.seeds.len()
    }

    /// Number of model evaluations (and `step` calls) in the plan.
    pub fn len(&self) -> usize {
        self.plan.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plan.is_empty()
    }

    /// Initial latents: standard normal noise from each sample's seed.
    pub fn initial_latents(&self, shape: (usize, usize, usize)) -> Result<Vec<LatentTensor>> {
        self.seeds
            .iter()
            .map(|&s| sample_noise(shape, &mut record_rng(s, 0)))
            .collect()
    }

    /// Timestep at which the model must be evaluated for plan step `i`.
    pub fn timestep(&self, i: usize) -> Result<i64> {
        let step = self
            .plan
            .get(i)
            .ok_or_else(|| Error::State(format!("step {i} outside plan of {}", self.plan.len())))?;
        Ok(match *step {
            PlanStep::Ancestral { t, .. } | PlanStep::Plms { t, .. } => t,
            PlanStep::Prk { sub, t, half, full } => match sub {
                0 => t,
                1 | 2 => t - half,
                _ => (t - full).max(0),
            },
        })
    }

    /// Consumes the model's noise prediction for plan step `i`.
    ///
    /// Ancestral steps are pure functions of their inputs and may be taken in
    /// any order; PNDM steps must follow the plan since they use stored history.
    pub fn step(&mut self, i: usize, noisy: &[LatentTensor], eps: &[LatentTensor]) -> Result<Vec<LatentTensor>> {
        if noisy.len() != self.batch() || eps.len() != self.batch() {
            return Err(Error::invalid(format!(
                "batch of {} latents and {} predictions for a session of {}",
                noisy.len(),
                eps.len(),
                self.batch()
            )));
        }
        for (x, e) in noisy.iter().zip(eps) {
            x.check_same_shape(e)?;
        }
        let step = *self
            .plan
            .get(i)
            .ok_or_else(|| Error::State(format!("step {i} outside plan of {}", self.plan.len())))?;
        if let PlanStep::Ancestral { t, t_prev } = step {
            return (0..self.batch())
                .map(|b| self.ancestral(b, i, &noisy[b], &eps[b], t, t_prev))
                .collect();
        }
        if i != self.next {
            return Err(Error::State(format!(
                "PNDM step {i} requested but the history only covers steps before {}",
                self.next
            )));
        }
        let out = (0..self.batch())
            .map(|b| self.pndm_step(b, step, &noisy[b], &eps[b]))
            .collect();
        self.next += 1;
        Ok(out)
    }

    fn ancestral(&self, b: usize, i: usize, x: &LatentTensor, eps: &LatentTensor, t: i64, t_prev: i64) -> Result<LatentTensor> {
        let s = &self.schedule;
        let ab = s.alpha_bar_at(t);
        let ab_prev = s.alpha_bar_at(t_prev);
        let beta = 1.0 - ab / ab_prev;
        let x0 = x.lincomb(1.0 / ab.sqrt(), eps, -(1.0 - ab).sqrt() / ab.sqrt());
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let mean = x0.lincomb(c0, x, ct);
        let var = (1.0 - ab_prev) / (1.0 - ab) * beta;
        if t_prev < 0 || var <= 0.0 {
            return Ok(mean);
        }
        let z = sample_noise(x.shape(), &mut record_rng(self.seeds[b], i as u64 + 1))?;
        Ok(mean.lincomb(1.0, &z, var.sqrt()))
    }

    fn pndm_step(&mut self, b: usize, step: PlanStep, x: &LatentTensor, eps: &LatentTensor) -> LatentTensor {
        let schedule = &self.schedule;
        let st = &mut self.pndm[b];
        match step {
            PlanStep::Prk { sub, t, half, full } => {
                if sub == 0 {
                    st.ets.push(eps.clone());
                    st.cur_sample = Some(x.clone());
                    st.acc = Some(eps.map(|v| v / 6.0));
                } else {
                    let w = if sub == 3 { 1.0 / 6.0 } else { 1.0 / 3.0 };
                    let acc = st.acc.take().expect("warm-up accumulator");
                    st.acc = Some(acc.lincomb(1.0, eps, w));
                }
                let cur = st.cur_sample.as_ref().expect("warm-up sample");
                match sub {
                    0 => pndm_transfer(cur, eps, t, t - half, schedule),
                    1 => pndm_transfer(cur, eps, t, t - half, schedule),
                    2 => pndm_transfer(cur, eps, t, t - full, schedule),
                    _ => {
                        let e = st.acc.take().expect("warm-up accumulator");
                        pndm_transfer(cur, &e, t, t - full, schedule)
                    }
                }
            }
            PlanStep::Plms { t, t_prev } => {
                if st.ets.len() > 3 {
                    st.ets.drain(..st.ets.len() - 3);
                }
                st.ets.push(eps.clone());
                let e = &st.ets;
                let n = e.len();
                let combined = match n {
                    1 => e[0].clone(),
                    2 => e[1].lincomb(1.5, &e[0], -0.5),
                    3 => e[2].lincomb(23.0 / 12.0, &e[1], -16.0 / 12.0).lincomb(1.0, &e[0], 5.0 / 12.0),
                    _ => e[n - 1]
                        .lincomb(55.0 / 24.0, &e[n - 2], -59.0 / 24.0)
                        .lincomb(1.0, &e[n - 3], 37.0 / 24.0)
                        .lincomb(1.0, &e[n - 4], -9.0 / 24.0),
                };
                pndm_transfer(x, &combined, t, t_prev, schedule)
            }
            PlanStep::Ancestral { .. } => unreachable!("ancestral steps are handled separately"),
        }
    }
}
