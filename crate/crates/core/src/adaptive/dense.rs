//! Dense (spatially invariant) convolution with a fused activation. This is
//! the adaptive operator with `K == 1`, `c == 1` and no normalization, written
//! without the tap-weight planes.

use rand::Rng;
use rayon::prelude::*;

use super::valid_range;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    None,
    Relu,
    Sigmoid,
}

impl Activation {
    #[inline]
    fn apply<T: Real>(self, v: T) -> T {
        match self {
            Activation::None => v,
            Activation::Relu => v.max(T::zero()),
            Activation::Sigmoid => T::one() / (T::one() + (-v).exp()),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_from_output<T: Real>(self, y: T) -> T {
        match self {
            Activation::None => T::one(),
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => y * (T::one() - y),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T: Real> {
    /// `(d_out, d_in, s, s)`
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ConvParams<T> {
    pub fn new(weight: Tensor<T>, bias: Vec<T>) -> Result<Self> {
        let [o, _, s, s2] = weight.shape();
        if s != s2 || s % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "kernel must be square with odd size, got {s}x{s2}"
            )));
        }
        if bias.len() != o {
            return Err(Error::shape("ConvParams::bias", o, bias.len()));
        }
        Ok(Self { weight, bias })
    }

    /// Uniform fan-in initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    /// for weights and bias.
    pub fn init_uniform<R: Rng>(d_out: usize, d_in: usize, s: usize, rng: &mut R) -> Self {
        let bound = 1.0 / ((d_in * s * s) as f64).sqrt();
        let weight = Tensor::from_fn([d_out, d_in, s, s], |_, _, _, _| T::of(rng.gen_range(-bound..bound)));
        let bias = (0..d_out).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
        Self { weight, bias }
    }

    pub fn size(&self) -> usize {
        self.weight.height()
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Clone, Debug)]
pub struct ConvCache<T: Real> {
    input: Tensor<T>,
    output: Tensor<T>,
    params: ConvParams<T>,
    activation: Activation,
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T: Real> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<f64>,
    pub bias: Vec<f64>,
}

/// `act(W * input + b)` with zero padding `s/2` and stride 1.
pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    params: &ConvParams<T>,
    activation: Activation,
) -> Result<(Tensor<T>, ConvCache<T>)> {
    let [n, d_in, h, w] = input.shape();
    let [d_out, wi, s, _] = params.weight.shape();
    if wi != d_in {
        return Err(Error::shape("conv2d input channels", wi, d_in));
    }
    input.ensure_finite("conv2d input")?;
    let hw = h * w;
    let r = (s / 2) as isize;
    let weight = params.weight.data();
    let samples: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|b| {
            let v = input.sample_slice(b);
            let mut out = vec![T::zero(); d_out * hw];
            for q in 0..d_out {
                let oq = &mut out[q * hw..(q + 1) * hw];
                oq.iter_mut().for_each(|x| *x = params.bias[q]);
                for p in 0..d_in {
                    let vp = &v[p * hw..(p + 1) * hw];
                    for ky in 0..s {
                        let dy = ky as isize - r;
                        let (y0, y1) = valid_range(h, dy);
                        for kx in 0..s {
                            let dx = kx as isize - r;
                            let (x0, x1) = valid_range(w, dx);
                            if x0 >= x1 {
                                continue;
                            }
                            let wv = weight[((q * d_in + p) * s + ky) * s + kx];
                            let len = x1 - x0;
                            for y in y0..y1 {
                                let j0 = ((y as isize + dy) * w as isize + x0 as isize + dx) as usize;
                                let dst = &mut oq[y * w + x0..y * w + x1];
                                for (d, &sv) in dst.iter_mut().zip(&vp[j0..j0 + len]) {
                                    *d += wv * sv;
                                }
                            }
                        }
                    }
                }
                if activation != Activation::None {
                    oq.iter_mut().for_each(|x| *x = activation.apply(*x));
                }
            }
            out
        })
        .collect();
    let out = Tensor::from_vec([n, d_out, h, w], samples.concat())
        .map_err(|e| Error::NonFinite(format!("conv2d output: {e}")))?;
    let cache = ConvCache {
        input: input.clone(),
        output: out.clone(),
        params: params.clone(),
        activation,
    };
    Ok((out, cache))
}

struct SampleGrads<T> {
    input: Vec<T>,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

pub fn conv2d_backward<T: Real>(
    cache: &ConvCache<T>,
    grad_output: &Tensor<T>,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    if grad_output.shape() != cache.output.shape() {
        return Err(Error::shape("conv2d_backward grad_output", cache.output.shape(), grad_output.shape()));
    }
    let [n, d_in, h, w] = cache.input.shape();
    let [d_out, _, s, _] = cache.params.weight.shape();
    let hw = h * w;
    let r = (s / 2) as isize;
    let weight = cache.params.weight.data();
    let act = cache.activation;

    let parts: Vec<SampleGrads<T>> = (0..n)
        .into_par_iter()
        .map(|b| {
            let v = cache.input.sample_slice(b);
            let y_out = cache.output.sample_slice(b);
            let gz: Vec<T> = grad_output
                .sample_slice(b)
                .iter()
                .zip(y_out)
                .map(|(&g, &y)| g * act.derivative_from_output(y))
                .collect();
            let mut gw = vec![0.0f64; weight.len()];
            let mut gb = vec![0.0f64; d_out];
            let mut gi = if need_input_grad { vec![T::zero(); d_in * hw] } else { Vec::new() };
            for q in 0..d_out {
                let gq = &gz[q * hw..(q + 1) * hw];
                gb[q] = gq.iter().map(|v| v.as_f64()).sum();
                for p in 0..d_in {
                    let vp = &v[p * hw..(p + 1) * hw];
                    for ky in 0..s {
                        let dy = ky as isize - r;
                        let (y0, y1) = valid_range(h, dy);
                        for kx in 0..s {
                            let dx = kx as isize - r;
                            let (x0, x1) = valid_range(w, dx);
                            if x0 >= x1 {
                                continue;
                            }
                            let widx = ((q * d_in + p) * s + ky) * s + kx;
                            let wv = weight[widx];
                            let len = x1 - x0;
                            let mut acc = 0.0f64;
                            for y in y0..y1 {
                                let i0 = y * w + x0;
                                let j0 = ((y as isize + dy) * w as isize + x0 as isize + dx) as usize;
                                let grow = &gq[i0..i0 + len];
                                let row: T = grow.iter().zip(&vp[j0..j0 + len]).map(|(&g, &x)| g * x).sum();
                                acc += row.as_f64();
                                if need_input_grad {
                                    let dst = &mut gi[p * hw + j0..p * hw + j0 + len];
                                    for (d, &g) in dst.iter_mut().zip(grow) {
                                        *d += wv * g;
                                    }
                                }
                            }
                            gw[widx] += acc;
                        }
                    }
                }
            }
            SampleGrads {
                input: gi,
                weight: gw,
                bias: gb,
            }
        })
        .collect();

    let mut gw = vec![0.0f64; weight.len()];
    let mut gb = vec![0.0f64; d_out];
    let mut gi = Vec::with_capacity(if need_input_grad { cache.input.len() } else { 0 });
    for part in parts {
        gw.iter_mut().zip(&part.weight).for_each(|(a, b)| *a += b);
        gb.iter_mut().zip(&part.bias).for_each(|(a, b)| *a += b);
        gi.extend_from_slice(&part.input);
    }
    Ok(ConvGrads {
        input: if need_input_grad {
            Some(Tensor::from_vec(cache.input.shape(), gi)?)
        } else {
            None
        },
        weight: Tensor::from_vec(cache.params.weight.shape(), gw)?,
        bias: gb,
    })
}
