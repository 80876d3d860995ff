use rayon::prelude::*;

use super::kernel::{fill_kernel, kernel_sums};
use super::{valid_range, AdaptiveConvConfig, AdaptiveKernelParams, NormalizationMode};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Everything [`adaptive_conv_backward`] needs from a forward call.
#[derive(Clone, Debug)]
pub struct ForwardCache<T: Real> {
    input: Tensor<T>,
    params: AdaptiveKernelParams<T>,
    mode: NormalizationMode,
    eps: T,
    features: Option<Tensor<T>>,
    confidences: Option<Tensor<T>>,
    /// Raw feature kernel `(n, s*s, h, w)`, zero outside the image.
    kernel: Tensor<T>,
    /// Advanced mode only: un-normalized sums and auxiliary-pass denominators.
    numer: Option<Tensor<T>>,
    denom: Option<Tensor<T>>,
    out_shape: [usize; 4],
}

impl<T: Real> ForwardCache<T> {
    pub fn kernel(&self) -> &Tensor<T> {
        &self.kernel
    }

    /// Auxiliary-pass denominators (before clamping), Advanced mode only.
    pub fn denominators(&self) -> Option<&Tensor<T>> {
        self.denom.as_ref()
    }

    pub fn output_shape(&self) -> [usize; 4] {
        self.out_shape
    }
}

/// Gradients of a scalar loss with respect to every differentiable input of
/// the adaptive operator. Parameter gradients are accumulated in `f64`.
#[derive(Clone, Debug)]
pub struct AdaptiveGrads<T: Real> {
    pub input: Tensor<T>,
    pub weight: Tensor<f64>,
    pub log_norm_weight: Tensor<f64>,
    pub bias: Vec<f64>,
    pub features: Option<Tensor<T>>,
    pub confidences: Option<Tensor<T>>,
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    d_in: usize,
    d_out: usize,
    feat: usize,
    h: usize,
    w: usize,
    s: usize,
    shared: bool,
}

impl Geometry {
    #[inline]
    fn hw(&self) -> usize {
        self.h * self.w
    }
    #[inline]
    fn taps(&self) -> usize {
        self.s * self.s
    }
    #[inline]
    fn widx(&self, q: usize, p: usize, o: usize) -> usize {
        if self.shared {
            o
        } else {
            (q * self.d_in + p) * self.taps() + o
        }
    }
    /// Output channels fed by input channel `p`.
    #[inline]
    fn outputs_of(&self, p: usize) -> std::ops::Range<usize> {
        if self.shared {
            p..p + 1
        } else {
            0..self.d_out
        }
    }
    #[inline]
    fn offset(&self, o: usize) -> (isize, isize) {
        let r = (self.s / 2) as isize;
        ((o / self.s) as isize - r, (o % self.s) as isize - r)
    }
}

fn validate<T: Real>(
    input: &Tensor<T>,
    params: &AdaptiveKernelParams<T>,
    cfg: &AdaptiveConvConfig<T>,
) -> Result<Geometry> {
    input.ensure_finite("adaptive_conv input")?;
    let [n, d_in, h, w] = input.shape();
    let [wo, wi, s, _] = params.weight.shape();
    let d_out = if params.shared_channels {
        if params.bias.len() != d_in {
            return Err(Error::shape("shared-channel bias", d_in, params.bias.len()));
        }
        d_in
    } else {
        if wi != d_in {
            return Err(Error::shape("adaptive weight input channels", d_in, wi));
        }
        wo
    };
    if params.bias.len() != d_out {
        return Err(Error::shape("adaptive bias", d_out, params.bias.len()));
    }
    if !(cfg.epsilon_denom > T::zero()) {
        return Err(Error::InvalidArgument("epsilon_denom must be positive".into()));
    }
    params.weight.ensure_finite("adaptive weight")?;
    params.log_norm_weight.ensure_finite("adaptive log normalization weight")?;
    let mut feat = 0;
    if let Some(f) = &cfg.features {
        if f.batch() != n || f.spatial() != (h, w) {
            return Err(Error::shape("adaptive features", [n, f.channels(), h, w], f.shape()));
        }
        f.ensure_finite("adaptive features")?;
        feat = f.channels();
    }
    if let Some(c) = &cfg.confidences {
        if c.shape() != [n, 1, h, w] {
            return Err(Error::shape("adaptive confidences", [n, 1, h, w], c.shape()));
        }
        c.ensure_finite("adaptive confidences")?;
    }
    Ok(Geometry {
        d_in,
        d_out,
        feat,
        h,
        w,
        s,
        shared: params.shared_channels,
    })
}

/// `sum_p exp(log_W'[q, p, o])` per output channel and tap; shared weights
/// give a single row.
fn norm_weight_sums<T: Real>(g: &Geometry, log_norm: &[T]) -> Vec<T> {
    let taps = g.taps();
    if g.shared {
        return log_norm.iter().map(|v| v.exp()).collect();
    }
    let mut sums = vec![T::zero(); g.d_out * taps];
    for q in 0..g.d_out {
        for p in 0..g.d_in {
            for o in 0..taps {
                sums[q * taps + o] += log_norm[g.widx(q, p, o)].exp();
            }
        }
    }
    sums
}

/// Kernel normalized per mode (`Khat`) and the full tap weight `c_j * Khat`.
fn tap_weights<T: Real>(
    g: &Geometry,
    kernel: &[T],
    conf: Option<&[T]>,
    mode: NormalizationMode,
    eps: T,
) -> (Vec<T>, Vec<T>) {
    let hw = g.hw();
    let taps = g.taps();
    let mut khat = kernel.to_vec();
    if mode == NormalizationMode::Kernel {
        let sums = kernel_sums(kernel, taps, hw);
        for o in 0..taps {
            for (v, &s) in khat[o * hw..(o + 1) * hw].iter_mut().zip(&sums) {
                *v = *v / s.max(eps);
            }
        }
    }
    let Some(c) = conf else {
        let a = khat.clone();
        return (khat, a);
    };
    let mut a = khat.clone();
    for o in 0..taps {
        let (dy, dx) = g.offset(o);
        let (y0, y1) = valid_range(g.h, dy);
        let (x0, x1) = valid_range(g.w, dx);
        if x0 >= x1 {
            continue;
        }
        let plane = &mut a[o * hw..(o + 1) * hw];
        for y in y0..y1 {
            let j0 = ((y as isize + dy) as usize) * g.w;
            let cj = &c[(j0 as isize + x0 as isize + dx) as usize..][..x1.saturating_sub(x0)];
            for (v, &cv) in plane[y * g.w + x0..y * g.w + x1].iter_mut().zip(cj) {
                *v *= cv;
            }
        }
    }
    (khat, a)
}

struct SampleForward<T> {
    out: Vec<T>,
    kernel: Vec<T>,
    numer: Vec<T>,
    denom: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
fn forward_sample<T: Real>(
    g: &Geometry,
    v: &[T],
    f: Option<&[T]>,
    c: Option<&[T]>,
    weight: &[T],
    wsum: &[T],
    bias: &[T],
    mode: NormalizationMode,
    eps: T,
) -> SampleForward<T> {
    let (hw, taps, w) = (g.hw(), g.taps(), g.w);
    let mut kernel = vec![T::zero(); taps * hw];
    fill_kernel(f, g.feat, g.h, g.w, g.s, &mut kernel);
    let (_, a) = tap_weights(g, &kernel, c, mode, eps);

    let mut numer = vec![T::zero(); g.d_out * hw];
    let mut tmp = vec![T::zero(); w];
    for o in 0..taps {
        let (dy, dx) = g.offset(o);
        let (y0, y1) = valid_range(g.h, dy);
        let (x0, x1) = valid_range(w, dx);
        let len = x1.saturating_sub(x0);
        if len == 0 {
            continue;
        }
        for y in y0..y1 {
            let i0 = y * w + x0;
            let j0 = (((y as isize + dy) as usize) * w) as isize + x0 as isize + dx;
            let arow = &a[o * hw + i0..o * hw + i0 + len];
            for p in 0..g.d_in {
                let vrow = &v[p * hw + j0 as usize..p * hw + j0 as usize + len];
                for ((t, &av), &vv) in tmp.iter_mut().zip(arow).zip(vrow) {
                    *t = av * vv;
                }
                for q in g.outputs_of(p) {
                    let wq = weight[g.widx(q, p, o)];
                    let nrow = &mut numer[q * hw + i0..q * hw + i0 + len];
                    for (nv, &t) in nrow.iter_mut().zip(&tmp[..len]) {
                        *nv += wq * t;
                    }
                }
            }
        }
    }

    let mut out = numer.clone();
    let mut denom = Vec::new();
    if mode == NormalizationMode::Advanced {
        denom = vec![T::zero(); g.d_out * hw];
        let rows = if g.shared { 1 } else { g.d_out };
        for q in 0..rows {
            let dq = &mut denom[q * hw..(q + 1) * hw];
            for o in 0..taps {
                let ws = wsum[q * taps + o];
                for (dv, &av) in dq.iter_mut().zip(&a[o * hw..(o + 1) * hw]) {
                    *dv += ws * av;
                }
            }
        }
        if g.shared {
            let (first, rest) = denom.split_at_mut(hw);
            for chunk in rest.chunks_mut(hw) {
                chunk.copy_from_slice(first);
            }
        }
        for (ov, &dv) in out.iter_mut().zip(&denom) {
            *ov = *ov / dv.max(eps);
        }
    }
    for q in 0..g.d_out {
        let b = bias[q];
        out[q * hw..(q + 1) * hw].iter_mut().for_each(|v| *v += b);
    }
    if mode != NormalizationMode::Advanced {
        numer = Vec::new();
    }
    SampleForward {
        out,
        kernel,
        numer,
        denom,
    }
}

/// Applies the adaptive convolution (stride 1, zero padding `s/2`).
///
/// Missing confidences act as `c == 1`, missing features as `K == 1`. In
/// `Advanced` mode the output is `numerator / max(denominator, eps) + b`
/// where the denominator repeats the sum with unit inputs and
/// `exp(log_norm_weight)` in place of the weight.
pub fn adaptive_conv_forward<T: Real>(
    input: &Tensor<T>,
    params: &AdaptiveKernelParams<T>,
    cfg: AdaptiveConvConfig<T>,
) -> Result<(Tensor<T>, ForwardCache<T>)> {
    let g = validate(input, params, &cfg)?;
    let [n, _, h, w] = input.shape();
    let wsum = if cfg.mode == NormalizationMode::Advanced {
        norm_weight_sums(&g, params.log_norm_weight.data())
    } else {
        Vec::new()
    };
    let results: Vec<SampleForward<T>> = (0..n)
        .into_par_iter()
        .map(|b| {
            forward_sample(
                &g,
                input.sample_slice(b),
                cfg.features.as_ref().map(|f| f.sample_slice(b)),
                cfg.confidences.as_ref().map(|c| c.sample_slice(b)),
                params.weight.data(),
                &wsum,
                &params.bias,
                cfg.mode,
                cfg.epsilon_denom,
            )
        })
        .collect();

    let out_shape = [n, g.d_out, h, w];
    let mut out = Vec::with_capacity(n * g.d_out * h * w);
    let mut kernel = Vec::with_capacity(n * g.taps() * h * w);
    let mut numer = Vec::new();
    let mut denom = Vec::new();
    for r in results {
        out.extend_from_slice(&r.out);
        kernel.extend_from_slice(&r.kernel);
        numer.extend_from_slice(&r.numer);
        denom.extend_from_slice(&r.denom);
    }
    let out = Tensor::from_vec(out_shape, out).map_err(|e| match e {
        Error::NonFinite(m) => Error::NonFinite(format!("adaptive_conv output: {m}")),
        other => other,
    })?;
    let advanced = cfg.mode == NormalizationMode::Advanced;
    let cache = ForwardCache {
        input: input.clone(),
        params: params.clone(),
        mode: cfg.mode,
        eps: cfg.epsilon_denom,
        features: cfg.features,
        confidences: cfg.confidences,
        kernel: Tensor::from_vec([n, g.taps(), h, w], kernel)?,
        numer: advanced.then(|| Tensor::from_vec(out_shape, numer)).transpose()?,
        denom: advanced.then(|| Tensor::from_vec(out_shape, denom)).transpose()?,
        out_shape,
    };
    Ok((out, cache))
}

struct SampleBackward<T> {
    input: Vec<T>,
    features: Vec<T>,
    confidences: Vec<T>,
    weight: Vec<f64>,
    norm_tap: Vec<f64>,
    bias: Vec<f64>,
}

fn backward_sample<T: Real>(
    g: &Geometry,
    cache: &ForwardCache<T>,
    b: usize,
    grad: &[T],
    wsum: &[T],
) -> SampleBackward<T> {
    let (hw, taps, w) = (g.hw(), g.taps(), g.w);
    let mode = cache.mode;
    let eps = cache.eps;
    let v = cache.input.sample_slice(b);
    let f = cache.features.as_ref().map(|t| t.sample_slice(b));
    let c = cache.confidences.as_ref().map(|t| t.sample_slice(b));
    let kernel = cache.kernel.sample_slice(b);
    let weight = cache.params.weight.data();
    let (khat, a) = tap_weights(g, kernel, c, mode, eps);

    let mut gbias = vec![0.0f64; g.d_out];
    for q in 0..g.d_out {
        gbias[q] = grad[q * hw..(q + 1) * hw].iter().map(|v| v.as_f64()).sum();
    }

    // split the upstream gradient through the quotient in Advanced mode
    let (gnum, gden): (Vec<T>, Vec<T>) = match (&cache.numer, &cache.denom) {
        (Some(nt), Some(dt)) => {
            let nu = nt.sample_slice(b);
            let de = dt.sample_slice(b);
            let mut gn = Vec::with_capacity(grad.len());
            let mut gd = Vec::with_capacity(grad.len());
            for ((&gv, &nv), &dv) in grad.iter().zip(nu).zip(de) {
                let dc = dv.max(eps);
                gn.push(gv / dc);
                gd.push(if dv >= eps { -gv * nv / (dc * dc) } else { T::zero() });
            }
            (gn, gd)
        }
        _ => (grad.to_vec(), Vec::new()),
    };

    let mut gweight = vec![0.0f64; cache.params.weight.len()];
    let mut gnorm_tap = vec![0.0f64; if g.shared { taps } else { g.d_out * taps }];
    let mut ginput = vec![T::zero(); g.d_in * hw];
    let mut ga = vec![T::zero(); taps * hw];

    for o in 0..taps {
        let (dy, dx) = g.offset(o);
        let (y0, y1) = valid_range(g.h, dy);
        let (x0, x1) = valid_range(w, dx);
        let len = x1.saturating_sub(x0);
        if len == 0 {
            continue;
        }
        for y in y0..y1 {
            let i0 = y * w + x0;
            let j0 = ((((y as isize + dy) as usize) * w) as isize + x0 as isize + dx) as usize;
            let arow = &a[o * hw + i0..o * hw + i0 + len];
            let garow = &mut ga[o * hw + i0..o * hw + i0 + len];
            for p in 0..g.d_in {
                let vrow = &v[p * hw + j0..p * hw + j0 + len];
                let girow = &mut ginput[p * hw + j0..p * hw + j0 + len];
                for q in g.outputs_of(p) {
                    let wi = g.widx(q, p, o);
                    let wq = weight[wi];
                    let grow = &gnum[q * hw + i0..q * hw + i0 + len];
                    let mut dw = T::zero();
                    for ((((&gv, &av), &vv), gi), gav) in grow
                        .iter()
                        .zip(arow)
                        .zip(vrow)
                        .zip(girow.iter_mut())
                        .zip(garow.iter_mut())
                    {
                        let ga_ = gv * av;
                        dw += ga_ * vv;
                        *gi += ga_ * wq;
                        *gav += gv * wq * vv;
                    }
                    gweight[wi] += dw.as_f64();
                }
            }
            if !gden.is_empty() {
                for q in 0..g.d_out {
                    let row = if g.shared { o } else { q * taps + o };
                    let ws = wsum[row];
                    let gdrow = &gden[q * hw + i0..q * hw + i0 + len];
                    let mut acc = T::zero();
                    for ((&gd, &av), gav) in gdrow.iter().zip(arow).zip(garow.iter_mut()) {
                        acc += gd * av;
                        *gav += gd * ws;
                    }
                    gnorm_tap[row] += acc.as_f64();
                }
            }
        }
    }

    // tap weight a = c_j * khat  ->  confidences and normalized kernel
    let mut gconf = if c.is_some() { vec![T::zero(); hw] } else { Vec::new() };
    let need_kernel_grad = f.is_some();
    let mut gkhat = if need_kernel_grad { ga.clone() } else { Vec::new() };
    if let Some(cv) = c {
        for o in 0..taps {
            let (dy, dx) = g.offset(o);
            let (y0, y1) = valid_range(g.h, dy);
            let (x0, x1) = valid_range(w, dx);
            let len = x1.saturating_sub(x0);
            if len == 0 {
                continue;
            }
            for y in y0..y1 {
                let i0 = y * w + x0;
                let j0 = ((((y as isize + dy) as usize) * w) as isize + x0 as isize + dx) as usize;
                let garow = &ga[o * hw + i0..o * hw + i0 + len];
                let krow = &khat[o * hw + i0..o * hw + i0 + len];
                for ((gc, &gav), &kv) in gconf[j0..j0 + len].iter_mut().zip(garow).zip(krow) {
                    *gc += gav * kv;
                }
                if need_kernel_grad {
                    let crow = &cv[j0..j0 + len];
                    for (gk, &cj) in gkhat[o * hw + i0..o * hw + i0 + len].iter_mut().zip(crow) {
                        *gk *= cj;
                    }
                }
            }
        }
    }

    let mut gfeat = Vec::new();
    if let Some(fv) = f {
        // khat -> raw kernel
        let mut gk = gkhat;
        if mode == NormalizationMode::Kernel {
            let sums = kernel_sums(kernel, taps, hw);
            let mut dot = vec![T::zero(); hw];
            for o in 0..taps {
                for ((d, &gv), &kv) in dot
                    .iter_mut()
                    .zip(&gk[o * hw..(o + 1) * hw])
                    .zip(&khat[o * hw..(o + 1) * hw])
                {
                    *d += gv * kv;
                }
            }
            for o in 0..taps {
                for ((gv, &s), &d) in gk[o * hw..(o + 1) * hw].iter_mut().zip(&sums).zip(&dot) {
                    *gv = if s >= eps { (*gv - d) / s } else { *gv / eps };
                }
            }
        }
        // K = exp(-|f_i - f_j|^2 / 2)
        gfeat = vec![T::zero(); g.feat * hw];
        let mut t = vec![T::zero(); w];
        for o in 0..taps {
            let (dy, dx) = g.offset(o);
            let (y0, y1) = valid_range(g.h, dy);
            let (x0, x1) = valid_range(w, dx);
            let len = x1.saturating_sub(x0);
            if len == 0 {
                continue;
            }
            for y in y0..y1 {
                let i0 = y * w + x0;
                let j0 = ((((y as isize + dy) as usize) * w) as isize + x0 as isize + dx) as usize;
                for ((tv, &gv), &kv) in t
                    .iter_mut()
                    .zip(&gk[o * hw + i0..o * hw + i0 + len])
                    .zip(&kernel[o * hw + i0..o * hw + i0 + len])
                {
                    *tv = gv * kv;
                }
                for ch in 0..g.feat {
                    let base = ch * hw;
                    for x in 0..len {
                        let diff = fv[base + i0 + x] - fv[base + j0 + x];
                        let step = t[x] * diff;
                        gfeat[base + i0 + x] -= step;
                        gfeat[base + j0 + x] += step;
                    }
                }
            }
        }
    }

    SampleBackward {
        input: ginput,
        features: gfeat,
        confidences: gconf,
        weight: gweight,
        norm_tap: gnorm_tap,
        bias: gbias,
    }
}

/// Reverse-mode gradients of the adaptive convolution given `dL/d(output)`.
pub fn adaptive_conv_backward<T: Real>(
    cache: &ForwardCache<T>,
    grad_output: &Tensor<T>,
) -> Result<AdaptiveGrads<T>> {
    if grad_output.shape() != cache.out_shape {
        return Err(Error::shape("adaptive_conv_backward grad_output", cache.out_shape, grad_output.shape()));
    }
    let [n, d_in, h, w] = cache.input.shape();
    let g = Geometry {
        d_in,
        d_out: cache.out_shape[1],
        feat: cache.features.as_ref().map_or(0, |f| f.channels()),
        h,
        w,
        s: cache.params.size(),
        shared: cache.params.shared_channels,
    };
    let log_norm = cache.params.log_norm_weight.data();
    let wsum = if cache.mode == NormalizationMode::Advanced {
        norm_weight_sums(&g, log_norm)
    } else {
        Vec::new()
    };

    let parts: Vec<SampleBackward<T>> = (0..n)
        .into_par_iter()
        .map(|b| backward_sample(&g, cache, b, grad_output.sample_slice(b), &wsum))
        .collect();

    let mut gweight = vec![0.0f64; cache.params.weight.len()];
    let mut gtap = vec![0.0f64; if g.shared { g.taps() } else { g.d_out * g.taps() }];
    let mut gbias = vec![0.0f64; g.d_out];
    let mut ginput = Vec::with_capacity(cache.input.len());
    let mut gfeat = Vec::new();
    let mut gconf = Vec::new();
    // fixed sample order keeps the reduction independent of thread count
    for part in parts {
        gweight.iter_mut().zip(&part.weight).for_each(|(a, b)| *a += b);
        gtap.iter_mut().zip(&part.norm_tap).for_each(|(a, b)| *a += b);
        gbias.iter_mut().zip(&part.bias).for_each(|(a, b)| *a += b);
        ginput.extend_from_slice(&part.input);
        gfeat.extend_from_slice(&part.features);
        gconf.extend_from_slice(&part.confidences);
    }

    // d/d(log W') = d/dW' * W', and dD/dW'[q,p,o] is the same for every p
    let mut glog = vec![0.0f64; log_norm.len()];
    if cache.mode == NormalizationMode::Advanced {
        if g.shared {
            for o in 0..g.taps() {
                glog[o] = gtap[o] * log_norm[o].as_f64().exp();
            }
        } else {
            for q in 0..g.d_out {
                for p in 0..g.d_in {
                    for o in 0..g.taps() {
                        let wi = g.widx(q, p, o);
                        glog[wi] = gtap[q * g.taps() + o] * log_norm[wi].as_f64().exp();
                    }
                }
            }
        }
    }

    let wshape = cache.params.weight.shape();
    Ok(AdaptiveGrads {
        input: Tensor::from_vec([n, d_in, h, w], ginput)?,
        weight: Tensor::from_vec(wshape, gweight)?,
        log_norm_weight: Tensor::from_vec(wshape, glog)?,
        bias: gbias,
        features: cache
            .features
            .as_ref()
            .map(|f| Tensor::from_vec(f.shape(), gfeat))
            .transpose()?,
        confidences: cache
            .confidences
            .as_ref()
            .map(|c| Tensor::from_vec(c.shape(), gconf))
            .transpose()?,
    })
}
