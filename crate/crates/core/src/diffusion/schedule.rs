//! Variance schedule for the guided diffusion chain.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Endpoints and length, as recorded in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub t_count: usize,
    pub alpha_first: f64,
    pub alpha_last: f64,
}

impl ScheduleConfig {
    /// The configuration used throughout the experiments section:
    /// T = 1000, alpha_1 = 1 - 1e-4, alpha_T = 0.98.
    pub fn paper() -> Self {
        ScheduleConfig {
            t_count: 1000,
            alpha_first: 1.0 - 1e-4,
            alpha_last: 0.98,
        }
    }
}

/// The alpha_t / alpha_bar_t sequences. Always computed in f64.
///
/// beta_t = 1 - alpha_t is linearly spaced between the endpoints, and
/// `alpha_bar` is the running product with `alpha_bar[0] = 1` so that t = 0
/// is the noise-free limit.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    config: ScheduleConfig,
}

pub fn make_schedule(t_count: usize, alpha_first: f64, alpha_last: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::new(ScheduleConfig {
        t_count,
        alpha_first,
        alpha_last,
    })
}

impl NoiseSchedule {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        let ScheduleConfig {
            t_count,
            alpha_first,
            alpha_last,
        } = config;
        if t_count == 0 {
            return Err(Error::config("schedule needs T >= 1"));
        }
        if !(0.0 < alpha_last && alpha_last < alpha_first && alpha_first < 1.0) {
            return Err(Error::config(format!(
                "schedule endpoints must satisfy 0 < alpha_last ({alpha_last}) < alpha_first ({alpha_first}) < 1"
            )));
        }
        let beta_first = 1.0 - alpha_first;
        let beta_last = 1.0 - alpha_last;
        let mut alpha = Vec::with_capacity(t_count);
        for t in 0..t_count {
            let beta = if t_count == 1 {
                beta_first
            } else {
                beta_first + (beta_last - beta_first) * t as f64 / (t_count - 1) as f64
            };
            alpha.push(1.0 - beta);
        }
        let mut alpha_bar = Vec::with_capacity(t_count + 1);
        alpha_bar.push(1.0);
        for &a in &alpha {
            alpha_bar.push(alpha_bar.last().unwrap() * a);
        }
        Ok(NoiseSchedule {
            alpha,
            alpha_bar,
            config,
        })
    }

    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    pub fn t_count(&self) -> usize {
        self.alpha.len()
    }

    /// alpha_t for t in 1..=T.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// alpha_bar_t for t in 0..=T, with alpha_bar_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_count() {
            return Err(Error::numeric(format!(
                "time step {t} outside 1..={}",
                self.t_count()
            )));
        }
        Ok(())
    }
}
