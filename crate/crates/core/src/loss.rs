//! Training objectives and their gradients with respect to the prediction.
//!
//! All squared errors use mean reduction so magnitudes do not depend on the
//! image size. Each `*_with_grad` variant returns the loss together with its
//! gradient with respect to the second (predicted) argument; the first
//! argument is a constant target.

use crate::error::{Error, Result};
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_eps: f64,
    pub lambda_pix: f64,
    pub lambda_per: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_eps: 1.0,
            lambda_pix: 1.0,
            lambda_per: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("lambda_eps", self.lambda_eps),
            ("lambda_pix", self.lambda_pix),
            ("lambda_per", self.lambda_per),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::param(field, format!("{v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Mean squared error and its gradient with respect to `pred`.
pub fn mse_with_grad(target: &Tensor, pred: &Tensor) -> Result<(f64, Tensor)> {
    target.ensure_same_shape(pred)?;
    let n = target.len() as f64;
    let mut sum = 0.0;
    let grad: Vec<f64> = target
        .as_slice()
        .iter()
        .zip(pred.as_slice())
        .map(|(&a, &b)| {
            let d = b - a;
            sum += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((sum / n, pred.with_data(grad)))
}

pub fn mse(target: &Tensor, pred: &Tensor) -> Result<f64> {
    target.ensure_same_shape(pred)?;
    let n = target.len() as f64;
    Ok(target
        .as_slice()
        .iter()
        .zip(pred.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

fn weighted(k: f64, (v, g): (f64, Tensor)) -> (f64, Tensor) {
    (k * v, g.scale(k))
}

pub fn eps_loss(eps_true: &Tensor, eps_pred: &Tensor, w: &LossWeights) -> Result<f64> {
    Ok(w.lambda_eps * mse(eps_true, eps_pred)?)
}

pub fn eps_loss_with_grad(eps_true: &Tensor, eps_pred: &Tensor, w: &LossWeights) -> Result<(f64, Tensor)> {
    Ok(weighted(w.lambda_eps, mse_with_grad(eps_true, eps_pred)?))
}

/// `max(1, a_t^2 / sigma_t^2) * mse(x_target, x_est)`.
pub fn distill_loss(x_target: &Tensor, x_est: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<f64> {
    Ok(sched.adaptive_weight(t)? * mse(x_target, x_est)?)
}

pub fn distill_loss_with_grad(
    x_target: &Tensor,
    x_est: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<(f64, Tensor)> {
    let lambda = sched.adaptive_weight(t)?;
    Ok(weighted(lambda, mse_with_grad(x_target, x_est)?))
}

pub fn pixel_loss(x0: &Tensor, x_est: &Tensor, w: &LossWeights) -> Result<f64> {
    Ok(w.lambda_pix * mse(x0, x_est)?)
}

pub fn pixel_loss_with_grad(x0: &Tensor, x_est: &Tensor, w: &LossWeights) -> Result<(f64, Tensor)> {
    Ok(weighted(w.lambda_pix, mse_with_grad(x0, x_est)?))
}

const KERNEL: usize = 5;
const HALF: isize = 2;

/// Frozen feature extractor standing in for a pretrained perceptual network.
///
/// The convolutional bank applies each 5x5 filter to every channel with zero
/// padding, at full resolution and after each 2x2 average-pool, and takes
/// absolute values.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureBank {
    Identity,
    Conv {
        filters: Vec<[f64; KERNEL * KERNEL]>,
        scales: usize,
    },
}

impl FeatureBank {
    /// 16 filters, 2 scales.
    pub fn seeded(seed: u64) -> Self {
        Self::random(seed, 16, 2)
    }

    pub fn random(seed: u64, count: usize, scales: usize) -> Self {
        let mut r = rng::substream(seed, "feature-bank");
        let bound = 1.0 / KERNEL as f64;
        let filters = (0..count)
            .map(|_| {
                let mut f = [0.0; KERNEL * KERNEL];
                f.iter_mut().for_each(|v| *v = r.random_range(-bound..bound));
                f
            })
            .collect();
        FeatureBank::Conv { filters, scales }
    }

    pub fn features(&self, x: &Tensor) -> Vec<f64> {
        match self {
            FeatureBank::Identity => x.as_slice().to_vec(),
            FeatureBank::Conv { filters, scales } => {
                let mut out = Vec::new();
                let mut level = x.clone();
                for sc in 0..*scales {
                    if sc > 0 {
                        match pool2(&level) {
                            Some(p) => level = p,
                            None => break,
                        }
                    }
                    for c in 0..level.channels() {
                        for f in filters {
                            out.extend(correlate(&level, c, f).into_iter().map(f64::abs));
                        }
                    }
                }
                out
            }
        }
    }

    /// Vector-Jacobian product: pulls a gradient over `features(x)` back to
    /// `x`. The subgradient of `|.|` at 0 is taken as 0.
    fn backprop(&self, x: &Tensor, upstream: &[f64]) -> Tensor {
        match self {
            FeatureBank::Identity => x.with_data(upstream.to_vec()),
            FeatureBank::Conv { filters, scales } => {
                let mut levels = vec![x.clone()];
                for _ in 1..*scales {
                    match pool2(levels.last().unwrap()) {
                        Some(p) => levels.push(p),
                        None => break,
                    }
                }
                let mut off = 0;
                let mut level_grads: Vec<Tensor> = Vec::with_capacity(levels.len());
                for level in &levels {
                    let (ch, h, w) = level.shape();
                    let mut g = Tensor::zeros(ch, h, w);
                    for c in 0..ch {
                        for f in filters {
                            let pre = correlate(level, c, f);
                            let up = &upstream[off..off + h * w];
                            off += h * w;
                            let d: Vec<f64> = pre
                                .iter()
                                .zip(up)
                                .map(|(&p, &u)| match p.partial_cmp(&0.0) {
                                    Some(std::cmp::Ordering::Greater) => u,
                                    Some(std::cmp::Ordering::Less) => -u,
                                    _ => 0.0,
                                })
                                .collect();
                            correlate_adjoint(&mut g, c, f, &d);
                        }
                    }
                    level_grads.push(g);
                }
                // fold coarse-level gradients back through the pools
                while level_grads.len() > 1 {
                    let coarse = level_grads.pop().unwrap();
                    let fine = level_grads.last_mut().unwrap();
                    unpool2_add(fine, &coarse);
                }
                level_grads.pop().unwrap()
            }
        }
    }
}

fn correlate(x: &Tensor, c: usize, f: &[f64; KERNEL * KERNEL]) -> Vec<f64> {
    let (_, h, w) = x.shape();
    let plane = x.channel(c);
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for di in -HALF..=HALF {
                let ii = i as isize + di;
                if ii < 0 || ii >= h as isize {
                    continue;
                }
                for dj in -HALF..=HALF {
                    let jj = j as isize + dj;
                    if jj < 0 || jj >= w as isize {
                        continue;
                    }
                    let k = ((di + HALF) as usize) * KERNEL + (dj + HALF) as usize;
                    acc += f[k] * plane[ii as usize * w + jj as usize];
                }
            }
            out[i * w + j] = acc;
        }
    }
    out
}

fn correlate_adjoint(g: &mut Tensor, c: usize, f: &[f64; KERNEL * KERNEL], d: &[f64]) {
    let (_, h, w) = g.shape();
    for i in 0..h {
        for j in 0..w {
            let up = d[i * w + j];
            if up == 0.0 {
                continue;
            }
            for di in -HALF..=HALF {
                let ii = i as isize + di;
                if ii < 0 || ii >= h as isize {
                    continue;
                }
                for dj in -HALF..=HALF {
                    let jj = j as isize + dj;
                    if jj < 0 || jj >= w as isize {
                        continue;
                    }
                    let k = ((di + HALF) as usize) * KERNEL + (dj + HALF) as usize;
                    let (ii, jj) = (ii as usize, jj as usize);
                    let v = g.get(c, ii, jj) + f[k] * up;
                    g.set(c, ii, jj, v);
                }
            }
        }
    }
}

fn pool2(x: &Tensor) -> Option<Tensor> {
    let (ch, h, w) = x.shape();
    let (ph, pw) = (h / 2, w / 2);
    if ph == 0 || pw == 0 {
        return None;
    }
    Some(Tensor::from_fn(ch, ph, pw, |c, i, j| {
        0.25 * (x.get(c, 2 * i, 2 * j)
            + x.get(c, 2 * i + 1, 2 * j)
            + x.get(c, 2 * i, 2 * j + 1)
            + x.get(c, 2 * i + 1, 2 * j + 1))
    }))
}

fn unpool2_add(fine: &mut Tensor, coarse: &Tensor) {
    let (ch, ph, pw) = coarse.shape();
    for c in 0..ch {
        for i in 0..ph {
            for j in 0..pw {
                let g = 0.25 * coarse.get(c, i, j);
                for (di, dj) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let v = fine.get(c, 2 * i + di, 2 * j + dj) + g;
                    fine.set(c, 2 * i + di, 2 * j + dj, v);
                }
            }
        }
    }
}

pub fn perceptual_loss(x0: &Tensor, x_est: &Tensor, bank: &FeatureBank, w: &LossWeights) -> Result<f64> {
    x0.ensure_same_shape(x_est)?;
    let (fa, fb) = (bank.features(x0), bank.features(x_est));
    let n = fa.len() as f64;
    let sum: f64 = fa.iter().zip(&fb).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(w.lambda_per * sum / n)
}

pub fn perceptual_loss_with_grad(
    x0: &Tensor,
    x_est: &Tensor,
    bank: &FeatureBank,
    w: &LossWeights,
) -> Result<(f64, Tensor)> {
    x0.ensure_same_shape(x_est)?;
    let (fa, fb) = (bank.features(x0), bank.features(x_est));
    let n = fa.len() as f64;
    let mut sum = 0.0;
    let up: Vec<f64> = fa
        .iter()
        .zip(&fb)
        .map(|(a, b)| {
            let d = b - a;
            sum += d * d;
            w.lambda_per * 2.0 * d / n
        })
        .collect();
    Ok((w.lambda_per * sum / n, bank.backprop(x_est, &up)))
}

/// The per-sample objective terms. `main` is the ε-loss for teacher
/// training and the distillation loss during distillation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub main: f64,
    pub pixel: f64,
    pub perceptual: f64,
}

pub fn total_loss(parts: &LossParts) -> Result<f64> {
    for (term, value) in [
        ("main", parts.main),
        ("pixel", parts.pixel),
        ("perceptual", parts.perceptual),
    ] {
        if !value.is_finite() {
            return Err(Error::NonFinite { term, value });
        }
    }
    Ok(parts.main + parts.pixel + parts.perceptual)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::linear_beta_schedule;

    fn pair(seed: u64) -> (Tensor, Tensor) {
        let mut r = rng::substream(seed, "lp");
        (
            Tensor::uniform((3, 8, 8), 0.0, 1.0, &mut r),
            Tensor::uniform((3, 8, 8), 0.0, 1.0, &mut r),
        )
    }

    fn loop_mse(a: &Tensor, b: &Tensor) -> f64 {
        let mut s = 0.0;
        for c in 0..a.channels() {
            for i in 0..a.height() {
                for j in 0..a.width() {
                    let d = a.get(c, i, j) - b.get(c, i, j);
                    s += d * d;
                }
            }
        }
        s / a.len() as f64
    }

    #[test]
    fn eps_loss_cases() {
        let w = LossWeights::default();
        let (a, b) = pair(1);
        assert_eq!(eps_loss(&a, &a, &w).unwrap(), 0.0);
        let off = a.map(|v| v + 1.0);
        assert!((eps_loss(&a, &off, &w).unwrap() - 1.0).abs() < 1e-12);
        assert!((eps_loss(&a, &b, &w).unwrap() - loop_mse(&a, &b)).abs() < 1e-15);
        assert!(matches!(
            eps_loss(&a, &Tensor::zeros(1, 8, 8), &w),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn distill_loss_cases() {
        let s = linear_beta_schedule(512, 1e-4, 2e-2).unwrap();
        let (a, b) = pair(2);
        assert_eq!(distill_loss(&a, &a, 30, &s).unwrap(), 0.0);
        // late steps: weight 1 since alpha_bar_512 < 1/2
        assert!(s.alpha_bar(512) < 0.5);
        assert!((distill_loss(&a, &b, 512, &s).unwrap() - loop_mse(&a, &b)).abs() < 1e-15);
        let off = a.map(|v| v + 1.0);
        let lam = s.alpha_bar(3) / (1.0 - s.alpha_bar(3));
        assert!((distill_loss(&a, &off, 3, &s).unwrap() - lam).abs() < 1e-9 * lam);
    }

    #[test]
    fn pixel_loss_cases() {
        let (a, b) = pair(3);
        let w = LossWeights::default();
        assert_eq!(pixel_loss(&a, &a, &w).unwrap(), 0.0);
        let off = LossWeights {
            lambda_pix: 0.0,
            ..w
        };
        assert_eq!(pixel_loss(&a, &b, &off).unwrap(), 0.0);
        assert!((pixel_loss(&a, &b, &w).unwrap() - loop_mse(&a, &b)).abs() < 1e-15);
    }

    #[test]
    fn perceptual_cases() {
        let (a, b) = pair(4);
        let w = LossWeights::default();
        let bank = FeatureBank::seeded(9);
        assert_eq!(perceptual_loss(&a, &a, &bank, &w).unwrap(), 0.0);
        let id = perceptual_loss(&a, &b, &FeatureBank::Identity, &w).unwrap();
        assert!((id - 0.1 * loop_mse(&a, &b)).abs() < 1e-15);
        let v1 = perceptual_loss(&a, &b, &bank, &w).unwrap();
        let v2 = perceptual_loss(&a, &b, &FeatureBank::seeded(9), &w).unwrap();
        assert_eq!(v1.to_bits(), v2.to_bits());
        assert!(v1 > 0.0);
        // 16 filters x 3 channels x (64 + 16) features
        assert_eq!(bank.features(&a).len(), 16 * 3 * 80);
    }

    #[test]
    fn perceptual_gradient_matches_finite_differences() {
        let (a, b) = pair(5);
        let w = LossWeights::default();
        let bank = FeatureBank::seeded(3);
        let (_, g) = perceptual_loss_with_grad(&a, &b, &bank, &w).unwrap();
        let mut r = rng::substream(6, "pg");
        for _ in 0..40 {
            let k = r.random_range(0..b.len());
            let h = 1e-6;
            let mut p = b.clone();
            p.as_mut_slice()[k] += h;
            let lp = perceptual_loss(&a, &p, &bank, &w).unwrap();
            p.as_mut_slice()[k] -= 2.0 * h;
            let lm = perceptual_loss(&a, &p, &bank, &w).unwrap();
            let num = (lp - lm) / (2.0 * h);
            let an = g.as_slice()[k];
            assert!((an - num).abs() / num.abs().max(1e-8) < 1e-4, "k={k}: {an} vs {num}");
        }
    }

    #[test]
    fn total_loss_cases() {
        assert_eq!(total_loss(&LossParts::default()).unwrap(), 0.0);
        let p = LossParts {
            main: 1.0,
            pixel: 2.0,
            perceptual: 3.0,
        };
        assert_eq!(total_loss(&p).unwrap(), 6.0);
        let bad = LossParts {
            pixel: f64::NAN,
            ..p
        };
        match total_loss(&bad) {
            Err(Error::NonFinite { term, .. }) => assert_eq!(term, "pixel"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let w = LossWeights {
            lambda_per: -1.0,
            ..Default::default()
        };
        assert!(w.validate().is_err());
    }
}
