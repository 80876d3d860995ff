//! Shared oracles for the integration tests and the acceptance runner.
#![allow(dead_code)]

use ppac_core::adaptive::{AdaptiveConvConfig, AdaptiveKernelParams, NormalizationMode};
use ppac_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct evaluation of the adaptive convolution with one loop per index:
/// batch, output channel, row, column, tap row, tap column (and input
/// channel innermost). Written from the defining sums, sharing no code with
/// the library kernels.
pub fn reference_forward(
    input: &Tensor<f64>,
    params: &AdaptiveKernelParams<f64>,
    cfg: &AdaptiveConvConfig<f64>,
) -> Tensor<f64> {
    let [n, d, h, w] = input.shape();
    let s = params.weight.height();
    let r = (s / 2) as isize;
    let d_out = params.bias.len();
    let eps = cfg.epsilon_denom;
    let feature = |b: usize, y: usize, x: usize| -> Vec<f64> {
        match &cfg.features {
            Some(f) => (0..f.channels()).map(|k| f.get(b, k, y, x)).collect(),
            None => Vec::new(),
        }
    };
    let conf = |b: usize, y: usize, x: usize| cfg.confidences.as_ref().map_or(1.0, |c| c.get(b, 0, y, x));
    let mut out = Tensor::zeros([n, d_out, h, w]);
    for b in 0..n {
        for q in 0..d_out {
            for y in 0..h {
                for x in 0..w {
                    let fi = feature(b, y, x);
                    // kernel over the window, zero outside the image
                    let mut k = vec![0.0; s * s];
                    for ky in 0..s {
                        for kx in 0..s {
                            let (jy, jx) = (y as isize + ky as isize - r, x as isize + kx as isize - r);
                            if jy < 0 || jx < 0 || jy >= h as isize || jx >= w as isize {
                                continue;
                            }
                            let fj = feature(b, jy as usize, jx as usize);
                            let dist2: f64 = fi.iter().zip(&fj).map(|(a, c)| (a - c) * (a - c)).sum();
                            k[ky * s + kx] = (-0.5 * dist2).exp();
                        }
                    }
                    if cfg.mode == NormalizationMode::Kernel {
                        let sum: f64 = k.iter().sum();
                        k.iter_mut().for_each(|v| *v /= sum.max(eps));
                    }
                    let (mut num, mut den) = (0.0, 0.0);
                    for ky in 0..s {
                        for kx in 0..s {
                            let (jy, jx) = (y as isize + ky as isize - r, x as isize + kx as isize - r);
                            if jy < 0 || jx < 0 || jy >= h as isize || jx >= w as isize {
                                continue;
                            }
                            let (jy, jx) = (jy as usize, jx as usize);
                            let a = conf(b, jy, jx) * k[ky * s + kx];
                            let channels: Vec<usize> = if params.shared_channels { vec![q] } else { (0..d).collect() };
                            for p in channels {
                                let (wq, wp) = if params.shared_channels { (0, 0) } else { (q, p) };
                                num += params.weight.get(wq, wp, ky, kx) * a * input.get(b, p, jy, jx);
                                den += params.log_norm_weight.get(wq, wp, ky, kx).exp() * a;
                            }
                        }
                    }
                    let v = match cfg.mode {
                        NormalizationMode::Advanced => num / den.max(eps),
                        _ => num,
                    };
                    out.set(b, q, y, x, v + params.bias[q]);
                }
            }
        }
    }
    out
}

/// Largest `|a - b| / max(1, |a|, |b|)`.
pub fn max_rel_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / 1f64.max(x.abs()).max(y.abs()))
        .fold(0.0, f64::max)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: [usize; 4], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(lo..hi))
}

/// A random operator instance: input, params and config.
pub struct Instance {
    pub input: Tensor<f64>,
    pub params: AdaptiveKernelParams<f64>,
    pub cfg: AdaptiveConvConfig<f64>,
}

pub const MODES: [NormalizationMode; 3] = [NormalizationMode::None, NormalizationMode::Kernel, NormalizationMode::Advanced];

/// Random shapes, modes, kernel sizes and optional inputs for `seed`.
pub fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=2);
    let d = rng.gen_range(1..=3);
    let h = rng.gen_range(1..=7);
    let w = rng.gen_range(1..=7);
    let s = [1, 3, 5][rng.gen_range(0..3)];
    let shared = rng.gen_bool(0.3);
    let d_out = if shared { d } else { rng.gen_range(1..=3) };
    let mode = MODES[rng.gen_range(0..3)];
    let wshape = if shared { [1, 1, s, s] } else { [d_out, d, s, s] };
    let weight = uniform(&mut rng, wshape, -1.0, 1.0);
    let log_norm = uniform(&mut rng, wshape, -2.0, 0.5);
    let bias = (0..d_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let params = AdaptiveKernelParams::new(weight, log_norm, bias, shared).unwrap();
    let mut cfg = AdaptiveConvConfig::new(mode);
    if rng.gen_bool(0.6) {
        let k = rng.gen_range(1..=4);
        cfg = cfg.with_features(uniform(&mut rng, [n, k, h, w], -1.5, 1.5));
    }
    if rng.gen_bool(0.6) {
        cfg = cfg.with_confidences(uniform(&mut rng, [n, 1, h, w], 0.0, 1.0));
    }
    Instance {
        input: uniform(&mut rng, [n, d, h, w], -2.0, 2.0),
        params,
        cfg,
    }
}

/// Single-channel object-boundary scene: `value_a` on the left object with
/// feature 0, `value_b` on the right one with feature 10. Returns (input,
/// features) of size `h x w` with the boundary after column `split`.
pub fn two_object_scene(h: usize, w: usize, split: usize, value_a: f64, value_b: f64) -> (Tensor<f64>, Tensor<f64>) {
    let input = Tensor::from_fn([1, 1, h, w], |_, _, _, x| if x < split { value_a } else { value_b });
    let features = Tensor::from_fn([1, 1, h, w], |_, _, _, x| if x < split { 0.0 } else { 10.0 });
    (input, features)
}

/// Positive, deliberately non-uniform `s x s` weights.
pub fn ramp_weights(s: usize) -> Tensor<f64> {
    Tensor::from_fn([1, 1, s, s], |_, _, y, x| 0.05 + 0.02 * (y * s + x) as f64)
}

/// Outlier construction: 3x3 image, center value 10 with confidence 0.01,
/// neighbors value 1; the four edge neighbors share the center's object
/// (confidence 1), the corners belong to another object.
pub fn outlier_scene() -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let input = Tensor::from_fn([1, 1, 3, 3], |_, _, y, x| if (y, x) == (1, 1) { 10.0 } else { 1.0 });
    let corner = |y: usize, x: usize| y != 1 && x != 1;
    let features = Tensor::from_fn([1, 1, 3, 3], |_, _, y, x| if corner(y, x) { 10.0 } else { 0.0 });
    let conf = Tensor::from_fn([1, 1, 3, 3], |_, _, y, x| if (y, x) == (1, 1) { 0.01 } else { 1.0 });
    (input, features, conf)
}
