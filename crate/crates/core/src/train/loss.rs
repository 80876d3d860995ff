use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Label value skipped by the segmentation loss and metrics.
pub const IGNORE_LABEL: u32 = 255;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// Mean endpoint error over valid pixels.
    Aee,
    /// Mean softmax cross entropy over labeled pixels.
    CrossEntropy,
}

/// Average endpoint error and its gradient with respect to `pred`.
///
/// `valid`, when given, is `(n, 1, h, w)`; pixels with value `<= 0.5` are
/// excluded from the mean.
pub fn aee_loss<T: Real>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    valid: Option<&Tensor<T>>,
) -> Result<(f64, Tensor<T>)> {
    if pred.shape() != gt.shape() || pred.channels() != 2 {
        return Err(Error::shape("aee_loss", gt.shape(), pred.shape()));
    }
    let [n, _, h, w] = pred.shape();
    if let Some(v) = valid {
        if v.shape() != [n, 1, h, w] {
            return Err(Error::shape("aee_loss valid mask", [n, 1, h, w], v.shape()));
        }
    }
    let hw = h * w;
    let is_valid = |b: usize, i: usize| valid.is_none_or(|v| v.sample_slice(b)[i] > T::of(0.5));
    let count = (0..n).flat_map(|b| (0..hw).map(move |i| (b, i))).filter(|&(b, i)| is_valid(b, i)).count();
    if count == 0 {
        return Err(Error::InvalidArgument("aee_loss: no valid pixels".into()));
    }
    let inv = 1.0 / count as f64;
    let mut grad = Tensor::zeros(pred.shape());
    let mut total = 0.0f64;
    for b in 0..n {
        let p = pred.sample_slice(b);
        let g = gt.sample_slice(b);
        let mut gu = vec![T::zero(); hw];
        let mut gv = vec![T::zero(); hw];
        for i in 0..hw {
            if !is_valid(b, i) {
                continue;
            }
            let du = (p[i] - g[i]).as_f64();
            let dv = (p[hw + i] - g[hw + i]).as_f64();
            let epe = (du * du + dv * dv).sqrt();
            total += epe;
            if epe > 0.0 {
                gu[i] = T::of(du / epe * inv);
                gv[i] = T::of(dv / epe * inv);
            }
        }
        grad.plane_mut(b, 0).copy_from_slice(&gu);
        grad.plane_mut(b, 1).copy_from_slice(&gv);
    }
    Ok((total * inv, grad))
}

/// Softmax cross entropy against integer `labels` stored as `(n, 1, h, w)`.
pub fn cross_entropy_loss<T: Real>(
    logits: &Tensor<T>,
    labels: &Tensor<T>,
    ignore_label: u32,
) -> Result<(f64, Tensor<T>)> {
    let [n, classes, h, w] = logits.shape();
    if labels.shape() != [n, 1, h, w] {
        return Err(Error::shape("cross_entropy_loss labels", [n, 1, h, w], labels.shape()));
    }
    let hw = h * w;
    let label_at = |b: usize, i: usize| labels.sample_slice(b)[i].as_f64().round() as u32;
    let mut count = 0usize;
    for b in 0..n {
        for i in 0..hw {
            let l = label_at(b, i);
            if l == ignore_label {
                continue;
            }
            if l as usize >= classes {
                return Err(Error::InvalidArgument(format!(
                    "label {l} out of range for {classes} classes"
                )));
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument("cross_entropy_loss: every pixel is ignored".into()));
    }
    let inv = 1.0 / count as f64;
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = 0.0;
    let mut probs = vec![0.0f64; classes];
    for b in 0..n {
        let z = logits.sample_slice(b);
        for i in 0..hw {
            let l = label_at(b, i);
            if l == ignore_label {
                continue;
            }
            let max = (0..classes).map(|c| z[c * hw + i].as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..classes {
                probs[c] = (z[c * hw + i].as_f64() - max).exp();
                sum += probs[c];
            }
            total -= (probs[l as usize] / sum).ln();
            for c in 0..classes {
                let target = if c == l as usize { 1.0 } else { 0.0 };
                grad.set(b, c, i / w, i % w, T::of((probs[c] / sum - target) * inv));
            }
        }
    }
    Ok((total * inv, grad))
}
