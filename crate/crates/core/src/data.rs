//! Seeded synthetic low-light pairs.
//!
//! Clean patches are sums of low-frequency sinusoids rescaled to [0.2, 1].
//! The low-light observation is `y = clamp(h * x0 + n, 0, 1)` with a smooth
//! illumination field `h` and Gaussian read noise `n`.

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::f64::consts::TAU;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Degradation {
    pub illum_lo: f64,
    pub illum_hi: f64,
    pub noise_sigma: f64,
}

impl Default for Degradation {
    fn default() -> Self {
        Self {
            illum_lo: 0.1,
            illum_hi: 0.5,
            noise_sigma: 0.03,
        }
    }
}

impl Degradation {
    /// `h = 1`, no noise: `y = x0`.
    pub fn identity() -> Self {
        Self {
            illum_lo: 1.0,
            illum_hi: 1.0,
            noise_sigma: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair {
    pub clean: Tensor,
    pub low: Tensor,
    pub illumination: Tensor,
}

/// An indexable, deterministic set of `(x0, y)` pairs. Pair `i` depends only
/// on `(seed, i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPairSource {
    seed: u64,
    len: usize,
    size: usize,
    channels: usize,
    degradation: Degradation,
}

pub fn make_synthetic_pairs(seed: u64, n: usize, size: usize) -> Result<SyntheticPairSource> {
    SyntheticPairSource::new(seed, n, size, 3, Degradation::default())
}

struct Wave {
    amp: f64,
    fi: f64,
    fj: f64,
    phase: f64,
}

impl Wave {
    fn random<R: Rng>(r: &mut R, amp: f64, max_freq: f64) -> Self {
        Wave {
            amp,
            fi: r.random_range(-max_freq..=max_freq),
            fj: r.random_range(-max_freq..=max_freq),
            phase: r.random_range(0.0..TAU),
        }
    }

    fn at(&self, i: usize, j: usize, size: usize) -> f64 {
        self.amp * (TAU * (self.fi * i as f64 + self.fj * j as f64) / size as f64 + self.phase).sin()
    }
}

impl SyntheticPairSource {
    pub fn new(seed: u64, len: usize, size: usize, channels: usize, degradation: Degradation) -> Result<Self> {
        if size < 4 {
            return Err(Error::param("size", format!("{size} < 4")));
        }
        if channels == 0 {
            return Err(Error::param("channels", "need at least one channel"));
        }
        if len == 0 {
            return Err(Error::param("n", "empty pair source"));
        }
        let d = degradation;
        if !(0.0 <= d.illum_lo && d.illum_lo <= d.illum_hi && d.noise_sigma >= 0.0) {
            return Err(Error::param("degradation", format!("{d:?}")));
        }
        Ok(Self {
            seed,
            len,
            size,
            channels,
            degradation,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.size, self.size)
    }

    pub fn pair(&self, index: usize) -> SyntheticPair {
        let mut r = rng::item_stream(self.seed, rng::DATA, index as u64);
        let (ch, n) = (self.channels, self.size);

        let shared: Vec<Wave> = (0..3).map(|k| Wave::random(&mut r, 1.0 / (k + 1) as f64, 1.5)).collect();
        let tint: Vec<Wave> = (0..ch).map(|_| Wave::random(&mut r, 0.35, 1.0)).collect();
        let raw = Tensor::from_fn(ch, n, n, |c, i, j| {
            shared.iter().map(|w| w.at(i, j, n)).sum::<f64>() + tint[c].at(i, j, n)
        });
        let lo = raw.as_slice().iter().copied().fold(f64::INFINITY, f64::min);
        let hi = raw.as_slice().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = (hi - lo).max(1e-12);
        let clean = raw.map(|v| 0.2 + 0.8 * (v - lo) / span);

        let d = self.degradation;
        let light = Wave::random(&mut r, 1.0, 0.5);
        let illumination = Tensor::from_fn(1, n, n, |_, i, j| {
            d.illum_lo + (d.illum_hi - d.illum_lo) * (0.5 + 0.5 * light.at(i, j, n))
        });
        let low = Tensor::from_fn(ch, n, n, |c, i, j| {
            let noise: f64 = StandardNormal.sample(&mut r);
            (illumination.get(0, i, j) * clean.get(c, i, j) + d.noise_sigma * noise).clamp(0.0, 1.0)
        });
        SyntheticPair {
            clean,
            low,
            illumination,
        }
    }
}
