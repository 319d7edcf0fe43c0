//! Trajectory algebra over a discrete schedule.
//!
//! The decoder `G(x_t, y, t, s)` is the deterministic (DDIM-style) jump
//!
//! ```text
//! G = (a_s / a_t) x_t + (sigma_s - (a_s / a_t) sigma_t) eps(x_t, y, t)
//! ```
//!
//! The teacher trajectory chains two jumps `t -> u -> s`; refinement blends it
//! with an anchor built from a latent clean image. Nothing in here clamps:
//! every relation is a linear identity and clamping happens only when a
//! sampler returns an image.

use crate::error::{Error, Result};
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::score::ScoreFunction;
use crate::tensor::Tensor;
use rand_distr::{Distribution, StandardNormal};

/// Steps `(t, u, s)` with `0 <= s <= u < t <= T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeTriple {
    pub t: usize,
    pub u: usize,
    pub s: usize,
}

impl TimeTriple {
    pub fn new(t: usize, u: usize, s: usize, sched: &NoiseSchedule) -> Result<Self> {
        sched.check_step(t)?;
        if !(s <= u && u < t) {
            return Err(Error::param(
                "triple",
                format!("need s <= u < t, got (t={t}, u={u}, s={s})"),
            ));
        }
        Ok(Self { t, u, s })
    }

    /// `u = floor((s + t) / 2)`.
    pub fn midpoint(t: usize, s: usize, sched: &NoiseSchedule) -> Result<Self> {
        if s >= t {
            return Err(Error::Ordering { t, s });
        }
        Self::new(t, (s + t) / 2, s, sched)
    }
}

/// A latent together with the step it lives at.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    pub x: Tensor,
    pub step: usize,
}

/// `x_t = a_t x0 + sigma_t eps`.
pub fn forward_diffuse(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_step(t)?;
    x0.lincomb(sched.a(t), eps, sched.sigma(t))
}

/// Coefficients `(c_x, c_eps)` of the jump `t -> s`.
pub fn decoder_coefficients(t: usize, s: usize, sched: &NoiseSchedule) -> (f64, f64) {
    let ratio = sched.a(s) / sched.a(t);
    (ratio, sched.sigma(s) - ratio * sched.sigma(t))
}

fn check_jump(t: usize, s: usize, sched: &NoiseSchedule) -> Result<()> {
    sched.check_step(t)?;
    if s > t {
        return Err(Error::Ordering { t, s });
    }
    Ok(())
}

/// The decoder applied to an already evaluated noise estimate.
pub fn decode_with_eps(x_t: &Tensor, eps: &Tensor, t: usize, s: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    check_jump(t, s, sched)?;
    if s == t {
        x_t.ensure_same_shape(eps)?;
        return Ok(x_t.clone());
    }
    let (cx, ce) = decoder_coefficients(t, s, sched);
    x_t.lincomb(cx, eps, ce)
}

/// One deterministic jump from `t` to `s`. `s == t` returns `x_t` unchanged
/// without evaluating the score.
pub fn decode<S: ScoreFunction + ?Sized>(
    score: &S,
    x_t: &Tensor,
    y: &Tensor,
    t: usize,
    s: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    check_jump(t, s, sched)?;
    if s == t {
        return Ok(x_t.clone());
    }
    let eps = score.predict(x_t, y, t)?;
    decode_with_eps(x_t, &eps, t, s, sched)
}

/// Everything the second-order teacher computes on its way to `x_s`.
#[derive(Debug, Clone)]
pub struct SecondOrder {
    pub eps_t: Tensor,
    pub x_u: Tensor,
    pub eps_u: Tensor,
    pub x_s: Tensor,
}

/// `G(G(x_t, y, t, u), y, u, s)` with its intermediates. Always evaluates
/// the score at `(x_t, t)` and `(x_u, u)`.
pub fn teacher_second_order_parts<S: ScoreFunction + ?Sized>(
    score: &S,
    x_t: &Tensor,
    y: &Tensor,
    triple: TimeTriple,
    sched: &NoiseSchedule,
) -> Result<SecondOrder> {
    let TimeTriple { t, u, s } = triple;
    let eps_t = score.predict(x_t, y, t)?;
    let x_u = decode_with_eps(x_t, &eps_t, t, u, sched)?;
    let eps_u = score.predict(&x_u, y, u)?;
    let x_s = decode_with_eps(&x_u, &eps_u, u, s, sched)?;
    Ok(SecondOrder {
        eps_t,
        x_u,
        eps_u,
        x_s,
    })
}

pub fn teacher_second_order<S: ScoreFunction + ?Sized>(
    score: &S,
    x_t: &Tensor,
    y: &Tensor,
    triple: TimeTriple,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    Ok(teacher_second_order_parts(score, x_t, y, triple, sched)?.x_s)
}

fn check_omega(omega: f64) -> Result<()> {
    if !(omega > 0.0 && omega <= 1.0) {
        return Err(Error::param("omega", format!("{omega} not in (0, 1]")));
    }
    Ok(())
}

/// `omega * x_second + (1 - omega) * x_anchor`.
pub fn refine(x_second: &Tensor, x_anchor: &Tensor, omega: f64) -> Result<Tensor> {
    check_omega(omega)?;
    x_second.lincomb(omega, x_anchor, 1.0 - omega)
}

/// The refined teacher trajectory written out term by term:
///
/// ```text
/// (a_s/a_t) x_t + sigma_s eps_u
///   + omega (a_s/a_u) sigma_u (eps_t - eps_u)
///   - (a_s/a_t) sigma_t (omega eps_t + (1 - omega) eps_tilde)
/// ```
///
/// Exists to cross-check [`refine`]; training uses the blended form.
pub fn refined_direct<S: ScoreFunction + ?Sized>(
    score: &S,
    x_t: &Tensor,
    y: &Tensor,
    triple: TimeTriple,
    eps_tilde: &Tensor,
    omega: f64,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    check_omega(omega)?;
    let TimeTriple { t, u, s } = triple;
    x_t.ensure_same_shape(eps_tilde)?;
    let eps_t = score.predict(x_t, y, t)?;
    let x_u = decode_with_eps(x_t, &eps_t, t, u, sched)?;
    let eps_u = score.predict(&x_u, y, u)?;
    let (a_s, a_t, a_u) = (sched.a(s), sched.a(t), sched.a(u));
    let (sig_s, sig_t, sig_u) = (sched.sigma(s), sched.sigma(t), sched.sigma(u));
    let out = x_t
        .as_slice()
        .iter()
        .zip(eps_t.as_slice())
        .zip(eps_u.as_slice())
        .zip(eps_tilde.as_slice())
        .map(|(((&x, &et), &eu), &etl)| {
            a_s / a_t * x + sig_s * eu + omega * (a_s / a_u) * sig_u * (et - eu)
                - a_s / a_t * sig_t * (omega * et + (1.0 - omega) * etl)
        })
        .collect();
    Ok(x_t.with_data(out))
}

/// Smallest denominator magnitude accepted by [`extract_clean`].
pub const EXTRACTION_FLOOR: f64 = 1e-9;

/// Denominator `a_s - (sigma_s / sigma_t) a_t` of the clean-image extraction.
pub fn extraction_denominator(t: usize, s: usize, sched: &NoiseSchedule) -> Result<f64> {
    check_jump(t, s, sched)?;
    let sig_t = sched.sigma(t);
    if sig_t == 0.0 {
        return Err(Error::DegeneratePair { t, s });
    }
    let den = sched.a(s) - sched.sigma(s) / sig_t * sched.a(t);
    if den.is_nan() || den.abs() <= EXTRACTION_FLOOR {
        return Err(Error::DegeneratePair { t, s });
    }
    Ok(den)
}

/// Clean image implied by a `t -> s` transition:
/// `(x_traj - (sigma_s/sigma_t) x_t) / (a_s - (sigma_s/sigma_t) a_t)`.
pub fn extract_clean(x_traj: &Tensor, x_t: &Tensor, t: usize, s: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    let den = extraction_denominator(t, s, sched)?;
    let k = sched.sigma(s) / sched.sigma(t);
    x_traj.zip_map(x_t, |xs, xt| (xs - k * xt) / den)
}

/// Variance of the literal one-step ancestral update, `1 - alpha_bar_t^2`.
///
/// Reported for reference only; the ancestral sampler uses the
/// variance-preserving posterior instead.
pub fn preliminary_ancestral_variance(sched: &NoiseSchedule, t: usize) -> f64 {
    1.0 - sched.alpha_bar(t).powi(2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerMode {
    /// Chained decoder jumps.
    Deterministic,
    /// Posterior `q(x_s | x_t, x0_hat)` draws.
    Ancestral,
}

/// Descending, uniformly spaced `k`-step grid `T = n_k > ... > n_0 = 0`.
pub fn sampling_grid(steps: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > steps {
        return Err(Error::param("K", format!("{k} not in 1..={steps}")));
    }
    Ok((0..=k).rev().map(|i| (i * steps + k / 2) / k).collect())
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub image: Tensor,
    /// Score evaluations spent.
    pub nfe: usize,
}

/// `k`-step sampling from seeded unit noise; returns the clamped step-0
/// estimate.
pub fn sample<S: ScoreFunction + ?Sized>(
    score: &S,
    y: &Tensor,
    k: usize,
    sched: &NoiseSchedule,
    mode: SamplerMode,
    seed: u64,
) -> Result<Tensor> {
    let grid = sampling_grid(sched.steps(), k)?;
    Ok(sample_on_grid(score, y, &grid, sched, mode, seed, |_, _| Ok(()))?.image)
}

/// Sampling over an explicit descending grid ending at 0. `on_step` sees
/// every latent, starting with the initial noise.
pub fn sample_on_grid<S, F>(
    score: &S,
    y: &Tensor,
    grid: &[usize],
    sched: &NoiseSchedule,
    mode: SamplerMode,
    seed: u64,
    mut on_step: F,
) -> Result<SampleOutput>
where
    S: ScoreFunction + ?Sized,
    F: FnMut(usize, &TrajectoryPoint) -> Result<()>,
{
    if grid.len() < 2 || grid.last() != Some(&0) || grid.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::param("grid", "must strictly decrease and end at 0"));
    }
    sched.check_step(grid[0])?;
    let mut noise = rng::substream(seed, rng::NOISE);
    let mut x = Tensor::randn(y.shape(), &mut noise);
    on_step(0, &TrajectoryPoint { x: x.clone(), step: grid[0] })?;
    let mut nfe = 0;
    for (i, w) in grid.windows(2).enumerate() {
        let (t, s) = (w[0], w[1]);
        let eps = score.predict(&x, y, t)?;
        nfe += 1;
        x = match mode {
            SamplerMode::Deterministic => decode_with_eps(&x, &eps, t, s, sched)?,
            SamplerMode::Ancestral => ancestral_step(&x, &eps, t, s, sched, &mut noise)?,
        };
        on_step(i + 1, &TrajectoryPoint { x: x.clone(), step: s })?;
    }
    Ok(SampleOutput {
        image: x.clamp(0.0, 1.0),
        nfe,
    })
}

fn ancestral_step<R: rand::Rng>(
    x_t: &Tensor,
    eps: &Tensor,
    t: usize,
    s: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    let (a_t, a_s) = (sched.a(t), sched.a(s));
    let (v_t, v_s) = (sched.sigma(t).powi(2), sched.sigma(s).powi(2));
    let a_ts = a_t / a_s;
    let v_ts = v_t - a_ts * a_ts * v_s;
    let x0_hat = x_t.lincomb(1.0 / a_t, eps, -sched.sigma(t) / a_t)?;
    let mean = x_t.lincomb(a_ts * v_s / v_t, &x0_hat, a_s * v_ts / v_t)?;
    let std = (v_ts * v_s / v_t).max(0.0).sqrt();
    if std == 0.0 {
        return Ok(mean);
    }
    let mut out = mean;
    for v in out.as_mut_slice() {
        let z: f64 = StandardNormal.sample(rng);
        *v += std * z;
    }
    Ok(out)
}
