//! Deterministic (eta = 0) DDIM sampling with optional guidance.

use serde::{Deserialize, Serialize};

use super::schedule::DiffusionSchedule;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Conditional,
    Unconditional,
}

/// A noise-prediction network evaluated on a flattened batch.
pub trait NoisePredictor {
    fn predict(&self, z_t: &[f64], t: usize, branch: Branch) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DdimConfig {
    pub steps: usize,
    pub guidance: f64,
    /// Clamp the predicted clean sample to `[-1, 1]` at each step.
    pub clip_denoised: bool,
}

impl Default for DdimConfig {
    fn default() -> Self {
        DdimConfig {
            steps: 100,
            guidance: 1.0,
            clip_denoised: true,
        }
    }
}

/// Evenly spaced timesteps in descending order.
pub fn ddim_timesteps(schedule_len: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > schedule_len {
        return Err(Error::InvalidConfig(format!(
            "DDIM steps must be in 1..={schedule_len}, got {steps}"
        )));
    }
    let stride = schedule_len / steps;
    Ok((0..steps).rev().map(|i| i * stride).collect())
}

pub fn ddim_sample<P: NoisePredictor + ?Sized>(
    predictor: &P,
    schedule: &DiffusionSchedule,
    initial_noise: Vec<f64>,
    cfg: &DdimConfig,
) -> Result<Vec<f64>> {
    if !(cfg.guidance >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "guidance must be non-negative, got {}",
            cfg.guidance
        )));
    }
    let timesteps = ddim_timesteps(schedule.len(), cfg.steps)?;
    let mut z = initial_noise;
    for (i, &t) in timesteps.iter().enumerate() {
        let eps = guided_eps(predictor, &z, t, cfg.guidance)?;
        let (a, s) = (schedule.alpha(t), schedule.sigma(t));
        let ab_prev = timesteps
            .get(i + 1)
            .map(|&p| schedule.alpha_bar()[p])
            .unwrap_or(1.0);
        let (a_prev, s_prev) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        for (zi, &ei) in z.iter_mut().zip(&eps) {
            let mut x0 = (*zi - s * ei) / a;
            let mut e = ei;
            if cfg.clip_denoised && x0.abs() > 1.0 {
                // keep the noise estimate consistent with the clamped sample
                x0 = x0.clamp(-1.0, 1.0);
                e = (*zi - a * x0) / s;
            }
            *zi = a_prev * x0 + s_prev * e;
        }
    }
    Ok(z)
}

fn guided_eps<P: NoisePredictor + ?Sized>(
    predictor: &P,
    z: &[f64],
    t: usize,
    guidance: f64,
) -> Result<Vec<f64>> {
    let cond = predictor.predict(z, t, Branch::Conditional)?;
    if guidance == 1.0 {
        return Ok(cond);
    }
    let uncond = predictor.predict(z, t, Branch::Unconditional)?;
    Ok(uncond
        .iter()
        .zip(&cond)
        .map(|(u, c)| u + guidance * (c - u))
        .collect())
}
