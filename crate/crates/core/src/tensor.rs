//! Dense `channels x height x width` arrays of `f64`.
//!
//! Images live on a [0, 1] pixel scale; latents and noise are unbounded.
//! All arithmetic is elementwise and allocation-light; there is no
//! broadcasting except where a method says so.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

pub type Shape = (usize, usize, usize);

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::full(channels, height, width, 0.0)
    }

    pub fn full(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let n = channels * height * width;
        if data.len() != n {
            return Err(Error::Width {
                expected: n,
                got: data.len(),
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for i in 0..height {
                for j in 0..width {
                    data.push(f(c, i, j));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    /// Standard normal draws.
    pub fn randn<R: Rng + ?Sized>(shape: Shape, rng: &mut R) -> Self {
        let (c, h, w) = shape;
        let data = (0..c * h * w).map(|_| rng.sample(StandardNormal)).collect();
        Self {
            channels: c,
            height: h,
            width: w,
            data,
        }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: Shape, lo: f64, hi: f64, rng: &mut R) -> Self {
        let (c, h, w) = shape;
        let data = (0..c * h * w).map(|_| rng.random_range(lo..hi)).collect();
        Self {
            channels: c,
            height: h,
            width: w,
            data,
        }
    }

    pub fn shape(&self) -> Shape {
        (self.channels, self.height, self.width)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[(c * self.height + i) * self.width + j]
    }

    #[inline]
    pub fn set(&mut self, c: usize, i: usize, j: usize, v: f64) {
        self.data[(c * self.height + i) * self.width + j] = v;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn ensure_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                expected: self.shape(),
                got: other.shape(),
            });
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        self.with_data(self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise combination of two equally shaped tensors.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.ensure_same_shape(other)?;
        Ok(self.with_data(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    /// `a * self + b * other`.
    pub fn lincomb(&self, a: f64, other: &Tensor, b: f64) -> Result<Tensor> {
        self.zip_map(other, |x, y| a * x + b * y)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |x, y| x + y)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |x, y| x - y)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| k * v)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Per-pixel mean over channels, as a single-channel tensor.
    pub fn luminance(&self) -> Tensor {
        if self.channels == 1 {
            return self.clone();
        }
        let plane = self.height * self.width;
        let mut out = vec![0.0; plane];
        for c in 0..self.channels {
            for (o, v) in out.iter_mut().zip(self.channel(c)) {
                *o += v;
            }
        }
        let k = self.channels as f64;
        out.iter_mut().for_each(|v| *v /= k);
        Tensor {
            channels: 1,
            height: self.height,
            width: self.width,
            data: out,
        }
    }

    /// Same shape, new contents.
    pub(crate) fn with_data(&self, data: Vec<f64>) -> Tensor {
        debug_assert_eq!(data.len(), self.data.len());
        Tensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data,
        }
    }
}

