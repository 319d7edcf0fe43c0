//! Full-reference quality metrics.
//!
//! Multichannel inputs are reduced to luminance (channel mean) first. SSIM
//! uses uniform 8x8 windows at stride 1 with population statistics and the
//! usual stabilizers for a unit dynamic range.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 8;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
}

fn luminance_pair(a: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
    a.ensure_same_shape(b)?;
    Ok((a.luminance(), b.luminance()))
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (la, lb) = luminance_pair(a, b)?;
    crate::loss::mse(&la, &lb)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
}

/// `10 log10(1 / MSE)` in dB, capped at 99.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (la, lb) = luminance_pair(a, b)?;
    let (h, w) = (la.height(), la.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::TooSmall {
            height: h,
            width: w,
            window: SSIM_WINDOW,
        });
    }
    let (pa, pb) = (la.as_slice(), lb.as_slice());
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for i0 in 0..=h - SSIM_WINDOW {
        for j0 in 0..=w - SSIM_WINDOW {
            let window = || {
                (i0..i0 + SSIM_WINDOW)
                    .flat_map(move |i| (j0..j0 + SSIM_WINDOW).map(move |j| i * w + j))
            };
            let mu_a = window().map(|k| pa[k]).sum::<f64>() / n;
            let mu_b = window().map(|k| pb[k]).sum::<f64>() / n;
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for k in window() {
                let (da, db) = (pa[k] - mu_a, pb[k] - mu_b);
                va += da * da;
                vb += db * db;
                cov += da * db;
            }
            let (va, vb, cov) = (va / n, vb / n, cov / n);
            // written so that a == b gives numerator == denominator bit for bit
            let num = (2.0 * (mu_a * mu_b) + C1) * (2.0 * cov + C2);
            let den = (mu_a * mu_a + mu_b * mu_b + C1) * (va + vb + C2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

pub fn report(a: &Tensor, b: &Tensor) -> Result<MetricReport> {
    let mse = mse(a, b)?;
    Ok(MetricReport {
        psnr: psnr_from_mse(mse),
        ssim: ssim(a, b)?,
        mse,
    })
}
