//! Fully connected ε-predictor with exact reverse-mode gradients.
//!
//! Input is the concatenation `[flatten(x_t), flatten(y), embed(t)]`; hidden
//! layers use SiLU; the output layer is linear. Parameters are one flat vector
//! laid out layer by layer as `W (out x in, row-major)` then `b (out)`.
//!
//! With [`Head::Prior`] the layers only learn a correction to the Gaussian
//! prior predictor, so the implied clean estimate stays well conditioned at
//! high noise and `x_t` need not pass through the hidden layers.

use super::ScoreFunction;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::{Shape, Tensor};
use rand::Rng;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_NET_ID: AtomicU64 = AtomicU64::new(1);

/// How the last linear layer maps to ε.
#[derive(Debug, Clone, Default, PartialEq)]
pub enum Head {
    /// The output is ε itself.
    #[default]
    Epsilon,
    /// The output `F` is a residual on top of the closed-form predictor for
    /// a `Normal(mean, var)` pixel prior:
    /// `ε = σ_t (x_t − a_t mean) / v_t + (a_t sqrt(var) / sqrt(v_t)) F` with
    /// `v_t = a_t² var + σ_t²`. Tables are indexed by step 0..=T.
    Prior {
        mean: f64,
        var: f64,
        a: Vec<f64>,
        sigma: Vec<f64>,
    },
}

impl Head {
    pub fn prior(sched: &NoiseSchedule, mean: f64, var: f64) -> Result<Self> {
        if !(mean.is_finite() && var.is_finite() && var > 0.0) {
            return Err(Error::param("prior", format!("mean {mean}, var {var}")));
        }
        let steps = 0..=sched.steps();
        Ok(Head::Prior {
            mean,
            var,
            a: steps.clone().map(|t| sched.a(t)).collect(),
            sigma: steps.map(|t| sched.sigma(t)).collect(),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Head::Epsilon => "epsilon",
            Head::Prior { .. } => "prior",
        }
    }

    /// `(skip, offset, scale)` with `ε = skip·x_t + offset + scale·F`.
    fn coefficients(&self, t: usize) -> Result<(f64, f64, f64)> {
        match self {
            Head::Epsilon => Ok((0.0, 0.0, 1.0)),
            Head::Prior { mean, var, a, sigma } => match (a.get(t), sigma.get(t)) {
                (Some(&a), Some(&s)) => {
                    let v = a * a * var + s * s;
                    Ok((s / v, -s * a * mean / v, a * var.sqrt() / v.sqrt()))
                }
                _ => Err(Error::Index {
                    step: t,
                    max: a.len().saturating_sub(1),
                }),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub image: Shape,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub head: Head,
}

impl Architecture {
    pub fn new(image: Shape, hidden: Vec<usize>, embed_dim: usize) -> Result<Self> {
        if image.0 * image.1 * image.2 == 0 {
            return Err(Error::param("image", "empty image shape"));
        }
        if hidden.contains(&0) {
            return Err(Error::param("hidden", "zero-width layer"));
        }
        if !embed_dim.is_multiple_of(2) {
            return Err(Error::param("embed_dim", format!("{embed_dim} must be even")));
        }
        Ok(Self {
            image,
            hidden,
            embed_dim,
            head: Head::Epsilon,
        })
    }

    pub fn with_head(mut self, head: Head) -> Self {
        self.head = head;
        self
    }

    /// Default desk-scale shape: three hidden layers of 128, 16-dim embedding.
    pub fn desk(image: Shape) -> Self {
        Self {
            image,
            hidden: vec![128, 128, 128],
            embed_dim: 16,
            head: Head::Epsilon,
        }
    }

    pub fn pixels(&self) -> usize {
        self.image.0 * self.image.1 * self.image.2
    }

    pub fn input_width(&self) -> usize {
        2 * self.pixels() + self.embed_dim
    }

    /// Layer widths from input to output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input_width());
        w.extend_from_slice(&self.hidden);
        w.push(self.pixels());
        w
    }

    pub fn param_count(&self) -> usize {
        self.widths().windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }
}

/// Sinusoidal features `[sin(t f_k), cos(t f_k)]`, `f_k = 10000^(-k/half)`.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    let freqs: Vec<f64> = (0..half)
        .map(|k| (-(10000f64.ln()) * k as f64 / half as f64).exp())
        .collect();
    out.extend(freqs.iter().map(|f| (t as f64 * f).sin()));
    out.extend(freqs.iter().map(|f| (t as f64 * f).cos()));
    out
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[derive(Debug)]
pub struct MicroNet {
    arch: Architecture,
    params: Vec<f64>,
    id: u64,
    generation: u64,
}

impl Clone for MicroNet {
    fn clone(&self) -> Self {
        Self::from_params(self.arch.clone(), self.params.clone()).expect("same architecture")
    }
}

impl PartialEq for MicroNet {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.params == other.params
    }
}

/// Activations recorded by a forward pass, consumed by
/// [`MicroNet::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    net_id: u64,
    generation: u64,
    // inputs[k] is the input of layer k; pre[k] the pre-activation of hidden layer k
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    head_scale: f64,
}

impl MicroNet {
    /// Uniform `±1/sqrt(fan_in)` init for hidden layers; the output layer is
    /// zero so the untrained net predicts ε = 0.
    pub fn init<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Self {
        let widths = arch.widths();
        let layers = widths.len() - 1;
        let mut params = Vec::with_capacity(arch.param_count());
        for (k, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let n = fan_in * fan_out + fan_out;
            if k + 1 == layers {
                params.extend(std::iter::repeat_n(0.0, n));
            } else {
                let bound = 1.0 / (fan_in as f64).sqrt();
                params.extend((0..n).map(|_| rng.random_range(-bound..bound)));
            }
        }
        Self::from_params(arch, params).expect("init produces the declared count")
    }

    pub fn zeros(arch: Architecture) -> Self {
        let n = arch.param_count();
        Self::from_params(arch, vec![0.0; n]).expect("declared count")
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        if params.len() != arch.param_count() {
            return Err(Error::param(
                "params",
                format!(
                    "architecture needs {} parameters, got {}",
                    arch.param_count(),
                    params.len()
                ),
            ));
        }
        Ok(Self {
            arch,
            params,
            id: NEXT_NET_ID.fetch_add(1, Ordering::Relaxed),
            generation: 0,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable access invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.generation += 1;
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::param("params", "length mismatch"));
        }
        self.params_mut().copy_from_slice(params);
        Ok(())
    }

    /// A copy of this architecture carrying other parameters.
    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        Self::from_params(self.arch.clone(), params)
    }

    fn assemble_input(&self, x_t: &Tensor, y: &Tensor, t: usize) -> Result<Vec<f64>> {
        let got = x_t.len() + y.len() + self.arch.embed_dim;
        if x_t.len() != self.arch.pixels() || y.len() != self.arch.pixels() {
            return Err(Error::Width {
                expected: self.arch.input_width(),
                got,
            });
        }
        let mut z = Vec::with_capacity(self.arch.input_width());
        z.extend_from_slice(x_t.as_slice());
        z.extend_from_slice(y.as_slice());
        z.extend(timestep_embedding(t, self.arch.embed_dim));
        Ok(z)
    }

    fn run(&self, input: Vec<f64>, record: bool) -> (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let widths = self.arch.widths();
        let layers = widths.len() - 1;
        let mut inputs = Vec::new();
        let mut pres = Vec::new();
        let mut z = input;
        let mut off = 0;
        for k in 0..layers {
            let (n_in, n_out) = (widths[k], widths[k + 1]);
            let w = &self.params[off..off + n_in * n_out];
            let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            off += n_in * n_out + n_out;
            let mut pre: Vec<f64> = b.to_vec();
            for (o, p) in pre.iter_mut().enumerate() {
                let row = &w[o * n_in..(o + 1) * n_in];
                *p += row.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>();
            }
            let last = k + 1 == layers;
            let next = if last {
                pre.clone()
            } else {
                pre.iter().map(|&v| silu(v)).collect()
            };
            if record {
                inputs.push(std::mem::take(&mut z));
                if !last {
                    pres.push(pre);
                }
            }
            z = next;
        }
        (z, inputs, pres)
    }

    fn apply_head(&self, x_t: &Tensor, mut out: Vec<f64>, t: usize) -> Result<Tensor> {
        let (skip, offset, scale) = self.arch.head.coefficients(t)?;
        if skip != 0.0 || offset != 0.0 || scale != 1.0 {
            for (o, x) in out.iter_mut().zip(x_t.as_slice()) {
                *o = skip * x + offset + scale * *o;
            }
        }
        Ok(x_t.with_data(out))
    }

    /// ε prediction for one sample.
    pub fn forward(&self, x_t: &Tensor, y: &Tensor, t: usize) -> Result<Tensor> {
        let input = self.assemble_input(x_t, y, t)?;
        let (out, _, _) = self.run(input, false);
        self.apply_head(x_t, out, t)
    }

    /// Forward pass that keeps the activations needed by [`Self::backward`].
    pub fn forward_cached(&self, x_t: &Tensor, y: &Tensor, t: usize) -> Result<(Tensor, ForwardCache)> {
        let input = self.assemble_input(x_t, y, t)?;
        let (out, inputs, pre) = self.run(input, true);
        let cache = ForwardCache {
            net_id: self.id,
            generation: self.generation,
            inputs,
            pre,
            head_scale: self.arch.head.coefficients(t)?.2,
        };
        Ok((self.apply_head(x_t, out, t)?, cache))
    }

    /// Gradient of a scalar loss with respect to every parameter, given the
    /// loss gradient at the network output.
    pub fn backward(&self, grad_out: &Tensor, cache: &ForwardCache) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.params.len()];
        self.backward_into(grad_out, cache, &mut g)?;
        Ok(g)
    }

    /// Like [`Self::backward`] but accumulates into `grad`.
    pub fn backward_into(&self, grad_out: &Tensor, cache: &ForwardCache, grad: &mut [f64]) -> Result<()> {
        if cache.net_id != self.id || cache.generation != self.generation {
            return Err(Error::StaleCache);
        }
        if grad.len() != self.params.len() {
            return Err(Error::param("grad", "length mismatch"));
        }
        if grad_out.len() != self.arch.pixels() {
            return Err(Error::Width {
                expected: self.arch.pixels(),
                got: grad_out.len(),
            });
        }
        let widths = self.arch.widths();
        let layers = widths.len() - 1;
        let offsets: Vec<usize> = widths
            .windows(2)
            .scan(0, |acc, p| {
                let o = *acc;
                *acc += p[0] * p[1] + p[1];
                Some(o)
            })
            .collect();

        let mut delta: Vec<f64> = grad_out.as_slice().iter().map(|g| g * cache.head_scale).collect();
        for k in (0..layers).rev() {
            let (n_in, n_out) = (widths[k], widths[k + 1]);
            let off = offsets[k];
            let input = &cache.inputs[k];
            {
                let (gw, gb) = grad[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
                for o in 0..n_out {
                    let d = delta[o];
                    gb[o] += d;
                    if d != 0.0 {
                        for (g, x) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(input) {
                            *g += d * x;
                        }
                    }
                }
            }
            if k == 0 {
                break;
            }
            let w = &self.params[off..off + n_in * n_out];
            let mut prev = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                if d != 0.0 {
                    for (p, wv) in prev.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                        *p += d * wv;
                    }
                }
            }
            for (p, &pre) in prev.iter_mut().zip(&cache.pre[k - 1]) {
                *p *= silu_grad(pre);
            }
            delta = prev;
        }
        Ok(())
    }
}

impl ScoreFunction for MicroNet {
    fn predict(&self, x_t: &Tensor, y: &Tensor, t: usize) -> Result<Tensor> {
        self.forward(x_t, y, t)
    }
}
