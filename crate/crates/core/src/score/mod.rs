//! ε-predictors.
//!
//! A [`ScoreFunction`] maps a noisy latent `x_t`, a condition `y` and a step
//! `t` to a noise estimate of the same shape as `x_t`. Three implementations
//! are provided: the closed-form optimum for Gaussian data
//! ([`GaussianOracle`]), a constant ([`ConstantScore`]) and a trainable
//! fully connected network ([`MicroNet`]).

mod micronet;
mod params_file;

pub use micronet::{timestep_embedding, Architecture, ForwardCache, Head, MicroNet};
pub use params_file::{read_params, read_params_from, write_params, write_params_to, PARAMS_MAGIC};

use crate::error::Result;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use std::sync::atomic::{AtomicUsize, Ordering};

pub trait ScoreFunction {
    fn predict(&self, x_t: &Tensor, y: &Tensor, t: usize) -> Result<Tensor>;
}

impl<S: ScoreFunction + ?Sized> ScoreFunction for &S {
    fn predict(&self, x_t: &Tensor, y: &Tensor, t: usize) -> Result<Tensor> {
        (**self).predict(x_t, y, t)
    }
}

impl<S: ScoreFunction + ?Sized> ScoreFunction for Box<S> {
    fn predict(&self, x_t: &Tensor, y: &Tensor, t: usize) -> Result<Tensor> {
        (**self).predict(x_t, y, t)
    }
}

/// Exact ε-predictor for data `x0 ~ Normal(mu, s2 * I)`.
///
/// The posterior mean of the noise is
/// `sigma_t * (x_t - a_t * mu) / (a_t^2 * s2 + sigma_t^2)`. The condition is
/// ignored.
#[derive(Debug, Clone)]
pub struct GaussianOracle {
    mu: Tensor,
    s2: f64,
    sched: NoiseSchedule,
}

pub fn gaussian_oracle(mu: Tensor, s2: f64, sched: &NoiseSchedule) -> Result<GaussianOracle> {
    GaussianOracle::new(mu, s2, sched)
}

impl GaussianOracle {
    pub fn new(mu: Tensor, s2: f64, sched: &NoiseSchedule) -> Result<Self> {
        if !(s2 >= 0.0 && s2.is_finite()) {
            return Err(crate::Error::param("s2", format!("variance {s2} must be >= 0")));
        }
        Ok(Self {
            mu,
            s2,
            sched: sched.clone(),
        })
    }

    pub fn mu(&self) -> &Tensor {
        &self.mu
    }

    pub fn variance(&self) -> f64 {
        self.s2
    }
}

impl ScoreFunction for GaussianOracle {
    fn predict(&self, x_t: &Tensor, _y: &Tensor, t: usize) -> Result<Tensor> {
        self.mu.ensure_same_shape(x_t)?;
        self.sched.check_step(t)?;
        let (a, sigma) = (self.sched.a(t), self.sched.sigma(t));
        if sigma == 0.0 {
            // Clean boundary: the noise coefficient vanishes, so any value
            // decodes identically; zero keeps point-mass data finite.
            return Ok(Tensor::zeros(x_t.channels(), x_t.height(), x_t.width()));
        }
        let denom = a * a * self.s2 + sigma * sigma;
        x_t.zip_map(&self.mu, |x, m| sigma * (x - a * m) / denom)
    }
}

/// Returns the same noise for every input.
#[derive(Debug, Clone)]
pub struct ConstantScore {
    eps: Tensor,
}

pub fn constant_score(eps: Tensor) -> ConstantScore {
    ConstantScore { eps }
}

impl ScoreFunction for ConstantScore {
    fn predict(&self, x_t: &Tensor, _y: &Tensor, _t: usize) -> Result<Tensor> {
        self.eps.ensure_same_shape(x_t)?;
        Ok(self.eps.clone())
    }
}

/// Counts evaluations of the wrapped predictor.
#[derive(Debug)]
pub struct CountingScore<S> {
    inner: S,
    calls: AtomicUsize,
}

impl<S> CountingScore<S> {
    pub fn new(inner: S) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset(&self) -> usize {
        self.calls.swap(0, Ordering::Relaxed)
    }

    pub fn inner(&self) -> &S {
        &self.inner
    }
}

impl<S: ScoreFunction> ScoreFunction for CountingScore<S> {
    fn predict(&self, x_t: &Tensor, y: &Tensor, t: usize) -> Result<Tensor> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.predict(x_t, y, t)
    }
}
