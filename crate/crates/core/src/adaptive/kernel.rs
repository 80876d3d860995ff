use super::{valid_range, NormalizationMode};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Gaussian RBF kernel `exp(-|fi - fj|^2 / 2)` with unit bandwidth.
pub fn rbf_kernel<T: Real>(fi: &[T], fj: &[T]) -> Result<T> {
    if fi.len() != fj.len() {
        return Err(Error::shape("rbf_kernel", fi.len(), fj.len()));
    }
    let sq: T = fi.iter().zip(fj).map(|(&a, &b)| (a - b) * (a - b)).sum();
    Ok((-T::of(0.5) * sq).exp())
}

/// Fills `out` (`s*s` planes of `h*w`) with `K(f_i, f_j)` for every neighbor
/// offset, zero where the neighbor falls outside the image. With no features
/// every in-image entry is one.
pub(crate) fn fill_kernel<T: Real>(
    features: Option<&[T]>,
    k: usize,
    h: usize,
    w: usize,
    s: usize,
    out: &mut [T],
) {
    let hw = h * w;
    let r = (s / 2) as isize;
    debug_assert_eq!(out.len(), s * s * hw);
    out.iter_mut().for_each(|v| *v = T::zero());
    let half = T::of(-0.5);
    for ky in 0..s {
        let dy = ky as isize - r;
        let (y0, y1) = valid_range(h, dy);
        for kx in 0..s {
            let dx = kx as isize - r;
            let (x0, x1) = valid_range(w, dx);
            if x0 >= x1 {
                continue;
            }
            let plane = &mut out[(ky * s + kx) * hw..(ky * s + kx + 1) * hw];
            for y in y0..y1 {
                let row = &mut plane[y * w + x0..y * w + x1];
                let jy = (y as isize + dy) as usize;
                let Some(f) = features else {
                    row.iter_mut().for_each(|v| *v = T::one());
                    continue;
                };
                // accumulate squared distance, then exponentiate in place
                for c in 0..k {
                    let fc = &f[c * hw..(c + 1) * hw];
                    let fi = &fc[y * w + x0..y * w + x1];
                    let js = (jy * w) as isize + x0 as isize + dx;
                    let fj = &fc[js as usize..js as usize + (x1 - x0)];
                    for ((acc, &a), &b) in row.iter_mut().zip(fi).zip(fj) {
                        let d = a - b;
                        *acc += d * d;
                    }
                }
                row.iter_mut().for_each(|v| *v = (half * *v).exp());
            }
        }
    }
}

/// Per-pixel sum of the kernel over the neighborhood.
pub(crate) fn kernel_sums<T: Real>(kernel: &[T], taps: usize, hw: usize) -> Vec<T> {
    let mut sums = vec![T::zero(); hw];
    for o in 0..taps {
        for (s, &k) in sums.iter_mut().zip(&kernel[o * hw..(o + 1) * hw]) {
            *s += k;
        }
    }
    sums
}

/// Materializes the feature kernel of every neighborhood as an
/// `(n, s*s, h, w)` tensor. Tap `ky * s + kx` holds `K(f_i, f_j)` for the
/// neighbor at offset `(ky - s/2, kx - s/2)`. `Kernel` mode divides each
/// pixel's taps by their sum, clamped below at `epsilon_denom`; the other
/// modes return the raw kernel.
pub fn kernel_tensor<T: Real>(
    features: &Tensor<T>,
    s: usize,
    mode: NormalizationMode,
    epsilon_denom: T,
) -> Result<Tensor<T>> {
    if s.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("kernel size must be odd, got {s}")));
    }
    let [n, k, h, w] = features.shape();
    let hw = h * w;
    let taps = s * s;
    let mut out = Tensor::zeros([n, taps, h, w]);
    for b in 0..n {
        let feats = features.sample_slice(b);
        let dst = &mut out.data_mut()[b * taps * hw..(b + 1) * taps * hw];
        fill_kernel(Some(feats), k, h, w, s, dst);
        if mode == NormalizationMode::Kernel {
            let sums = kernel_sums(dst, taps, hw);
            for o in 0..taps {
                for (v, &sum) in dst[o * hw..(o + 1) * hw].iter_mut().zip(&sums) {
                    *v = *v / sum.max(epsilon_denom);
                }
            }
        }
    }
    Ok(out)
}
