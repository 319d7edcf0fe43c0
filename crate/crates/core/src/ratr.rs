//! Reflectance-aware trajectory refinement.
//!
//! A low-light condition `y` is split Retinex-style into an illumination map
//! `h'` (per-pixel channel maximum, floored), a noise map
//! `z' = |y - psi(y)|` for a non-learned denoiser `psi`, and a latent clean
//! image `x~0 = clamp((y - z') / h', 0, 1)`. The latent clean image defines
//! the residual-shifted noise and the anchor the teacher trajectory is
//! blended with.

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::score::ScoreFunction;
use crate::tensor::Tensor;

/// Lower clamp for the illumination map on a [0, 1] scale.
pub const ILLUMINATION_FLOOR: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct RetinexDecomposition {
    /// Single channel, in `[floor, 1]`.
    pub illumination: Tensor,
    /// Non-negative, same shape as the input.
    pub noise_map: Tensor,
    /// In `[0, 1]`, same shape as the input.
    pub latent_clean: Tensor,
}

/// A non-learned denoiser.
pub trait Denoiser {
    fn denoise(&self, y: &Tensor) -> Tensor;
}

/// Per-channel 3x3 median with replicated borders.
#[derive(Debug, Clone, Copy, Default)]
pub struct Median3x3;

impl Denoiser for Median3x3 {
    fn denoise(&self, y: &Tensor) -> Tensor {
        let (ch, h, w) = y.shape();
        let mut out = Tensor::zeros(ch, h, w);
        let mut win = [0.0f64; 9];
        for c in 0..ch {
            for i in 0..h {
                for j in 0..w {
                    let mut n = 0;
                    for di in -1isize..=1 {
                        for dj in -1isize..=1 {
                            let ii = (i as isize + di).clamp(0, h as isize - 1) as usize;
                            let jj = (j as isize + dj).clamp(0, w as isize - 1) as usize;
                            win[n] = y.get(c, ii, jj);
                            n += 1;
                        }
                    }
                    win.sort_unstable_by(f64::total_cmp);
                    out.set(c, i, j, win[4]);
                }
            }
        }
        out
    }
}

pub fn illumination_map(y: &Tensor) -> Result<Tensor> {
    illumination_map_with_floor(y, ILLUMINATION_FLOOR)
}

pub fn illumination_map_with_floor(y: &Tensor, floor: f64) -> Result<Tensor> {
    if y.is_empty() {
        return Err(Error::Shape {
            expected: (1, 1, 1),
            got: y.shape(),
        });
    }
    let (ch, h, w) = y.shape();
    Ok(Tensor::from_fn(1, h, w, |_, i, j| {
        (0..ch)
            .map(|c| y.get(c, i, j))
            .fold(f64::NEG_INFINITY, f64::max)
            .max(floor)
    }))
}

/// The default denoiser, [`Median3x3`].
pub fn denoise(y: &Tensor) -> Tensor {
    Median3x3.denoise(y)
}

pub fn noise_map(y: &Tensor) -> Tensor {
    noise_map_with(y, &Median3x3)
}

pub fn noise_map_with<D: Denoiser + ?Sized>(y: &Tensor, psi: &D) -> Tensor {
    let clean = psi.denoise(y);
    y.zip_map(&clean, |a, b| (a - b).abs())
        .expect("denoiser preserves shape")
}

pub fn latent_clean(y: &Tensor) -> Result<RetinexDecomposition> {
    latent_clean_with(y, &Median3x3, ILLUMINATION_FLOOR)
}

pub fn latent_clean_with<D: Denoiser + ?Sized>(y: &Tensor, psi: &D, floor: f64) -> Result<RetinexDecomposition> {
    let illumination = illumination_map_with_floor(y, floor)?;
    let noise_map = noise_map_with(y, psi);
    let (ch, h, w) = y.shape();
    let latent_clean = Tensor::from_fn(ch, h, w, |c, i, j| {
        ((y.get(c, i, j) - noise_map.get(c, i, j)) / illumination.get(0, i, j)).clamp(0.0, 1.0)
    });
    Ok(RetinexDecomposition {
        illumination,
        noise_map,
        latent_clean,
    })
}

/// Noise measured against the latent clean image:
/// `(x_t - a_t x~0) / sigma_t`.
pub fn residual_noise(x_t: &Tensor, x_tilde0: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_step(t)?;
    let sig = sched.sigma(t);
    if sig == 0.0 {
        return Err(Error::SingularStep(t));
    }
    let a = sched.a(t);
    x_t.zip_map(x_tilde0, |x, c| (x - a * c) / sig)
}

/// `a_s x~0 + sigma_s eps(x_u, y, u)`.
pub fn refinement_anchor<S: ScoreFunction + ?Sized>(
    score: &S,
    x_u: &Tensor,
    y: &Tensor,
    u: usize,
    s: usize,
    x_tilde0: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    sched.check_step(u)?;
    if s > u {
        return Err(Error::Ordering { t: u, s });
    }
    let eps_u = score.predict(x_u, y, u)?;
    x_tilde0.lincomb(sched.a(s), &eps_u, sched.sigma(s))
}
