//! Scaled-linear beta schedule and the forward noising process.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Schedule hyperparameters, kept separate from the derived tables so they
/// can ride along in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { timesteps: 1000, beta_start: 0.000_85, beta_end: 0.012 }
    }
}

/// Beta schedule with precomputed alpha and cumulative-alpha tables.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub config: ScheduleConfig,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Scaled-linear schedule: sqrt(beta) interpolates linearly from
    /// sqrt(beta_start) to sqrt(beta_end).
    pub fn scaled_linear(config: ScheduleConfig) -> Result<Self> {
        let t = config.timesteps;
        if t == 0 {
            return Err(Error::config("schedule needs at least one timestep"));
        }
        if !(config.beta_start > 0.0 && config.beta_end < 1.0 && config.beta_start <= config.beta_end) {
            return Err(Error::config(format!(
                "betas must satisfy 0 < start <= end < 1, got {} .. {}",
                config.beta_start, config.beta_end
            )));
        }
        let s0 = config.beta_start.sqrt();
        let s1 = config.beta_end.sqrt();
        let mut betas = Vec::with_capacity(t);
        for i in 0..t {
            let frac = if t == 1 { 0.0 } else { i as f64 / (t - 1) as f64 };
            let s = s0 + frac * (s1 - s0);
            betas.push(s * s);
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(t);
        let mut acc = 1.0;
        for &a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        for w in alpha_bars.windows(2) {
            if w[1] >= w[0] {
                return Err(Error::Numerical("alpha-bar sequence is not strictly decreasing".into()));
            }
        }
        Ok(NoiseSchedule { config, betas, alphas, alpha_bars })
    }

    pub fn default_schedule() -> Self {
        Self::scaled_linear(ScheduleConfig::default()).expect("default schedule is valid")
    }

    pub fn timesteps(&self) -> usize {
        self.config.timesteps
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or_else(|| Error::invalid(format!("timestep {t} outside schedule of {}", self.timesteps())))
    }

    /// Forward process on flattened latents: sqrt(abar)·z0 + sqrt(1−abar)·eps.
    pub fn add_noise(&self, z0: &Array2<f64>, eps: &Array2<f64>, t: usize) -> Result<Array2<f64>> {
        if z0.dim() != eps.dim() {
            return Err(Error::dim("add_noise", format!("{:?}", z0.dim()), format!("{:?}", eps.dim())));
        }
        let abar = self.alpha_bar(t)?;
        Ok(z0 * abar.sqrt() + eps * (1.0 - abar).sqrt())
    }
}
