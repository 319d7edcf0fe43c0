//! Discrete variance-preserving noise schedule.
//!
//! Steps are 1-indexed (`1..=T`). Step 0 is the clean-data boundary with
//! `a_0 = 1` and `sigma_0 = 0`, so decoding "to step 0" yields a clean-image
//! estimate.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    // All per-step vectors have length T + 1; index 0 is the boundary.
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    a: Vec<f64>,
    sigma: Vec<f64>,
}

/// Linearly spaced betas from `beta_start` to `beta_end` inclusive.
pub fn linear_beta_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::param("T", format!("need at least 2 steps, got {steps}")));
    }
    if !(beta_start > 0.0 && beta_start < 1.0) {
        return Err(Error::param("beta_start", format!("{beta_start} not in (0, 1)")));
    }
    if !(beta_end >= beta_start && beta_end < 1.0) {
        return Err(Error::param(
            "beta_end",
            format!("{beta_end} not in [beta_start, 1)"),
        ));
    }
    let span = (steps - 1) as f64;
    let mut beta = Vec::with_capacity(steps + 1);
    beta.push(0.0);
    beta.extend((0..steps).map(|i| beta_start + (beta_end - beta_start) * i as f64 / span));
    Ok(NoiseSchedule::from_betas(steps, beta_start, beta_end, beta))
}

impl NoiseSchedule {
    fn from_betas(steps: usize, beta_start: f64, beta_end: f64, beta: Vec<f64>) -> Self {
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        let mut prod = 1.0;
        alpha_bar.push(prod);
        for &b in &beta[1..] {
            prod *= 1.0 - b;
            alpha_bar.push(prod);
        }
        let a = alpha_bar.iter().map(|v| v.sqrt()).collect();
        let sigma = alpha_bar.iter().map(|v| (1.0 - v).sqrt()).collect();
        Self {
            steps,
            beta_start,
            beta_end,
            beta,
            alpha_bar,
            a,
            sigma,
        }
    }

    /// The step count `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta_start(&self) -> f64 {
        self.beta_start
    }

    pub fn beta_end(&self) -> f64 {
        self.beta_end
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t > self.steps {
            return Err(Error::Index {
                step: t,
                max: self.steps,
            });
        }
        Ok(())
    }

    /// Per-step variance; `beta(0)` is 0 by convention.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Signal coefficient `sqrt(alpha_bar_t)`.
    pub fn a(&self, t: usize) -> f64 {
        self.a[t]
    }

    /// Noise coefficient `sqrt(1 - alpha_bar_t)`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    /// `a_t^2 / sigma_t^2`; infinite at the boundary.
    pub fn snr(&self, t: usize) -> f64 {
        self.alpha_bar[t] / (1.0 - self.alpha_bar[t])
    }

    /// Distillation weight `max(1, a_t^2 / sigma_t^2)` for `1 <= t <= T`.
    pub fn adaptive_weight(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.steps {
            return Err(Error::Index {
                step: t,
                max: self.steps,
            });
        }
        Ok(self.snr(t).max(1.0))
    }
}

/// Free-function form of [`NoiseSchedule::adaptive_weight`].
pub fn adaptive_weight(sched: &NoiseSchedule, t: usize) -> Result<f64> {
    sched.adaptive_weight(t)
}
