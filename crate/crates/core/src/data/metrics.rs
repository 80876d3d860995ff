//! Flow and segmentation metrics.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Default band radius for the boundary AEE.
pub const BOUNDARY_RADIUS: f64 = 10.0;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageMetrics {
    pub aee: Option<f64>,
    pub outlier_rate_3px: Option<f64>,
    pub boundary_aee: Option<f64>,
    pub miou: Option<f64>,
}

/// Batch-level metrics (pixel-weighted for flow, pooled confusion for
/// segmentation) plus a per-image breakdown.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub aee: Option<f64>,
    pub outlier_rate_3px: Option<f64>,
    pub boundary_aee: Option<f64>,
    pub miou: Option<f64>,
    pub per_image: Vec<ImageMetrics>,
}

/// The KITTI rule: wrong by more than 3 px and by more than 5% of the truth.
pub fn is_outlier(epe: f64, gt_magnitude: f64) -> bool {
    epe > 3.0 && epe > 0.05 * gt_magnitude
}

/// Pixels within `radius` (Euclidean, pixel centers) of a label boundary.
/// A pixel is on the boundary when its right or lower neighbor differs.
pub fn boundary_band(labels: &[u32], h: usize, w: usize, radius: f64) -> Vec<bool> {
    let mut edge = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w && labels[i] != labels[i + 1] {
                edge[i] = true;
                edge[i + 1] = true;
            }
            if y + 1 < h && labels[i] != labels[i + w] {
                edge[i] = true;
                edge[i + w] = true;
            }
        }
    }
    let r = radius.max(0.0).floor() as isize;
    let r2 = radius * radius;
    let mut band = vec![false; h * w];
    for (i, _) in edge.iter().enumerate().filter(|(_, e)| **e) {
        let (cy, cx) = ((i / w) as isize, (i % w) as isize);
        for dy in -r..=r {
            let y = cy + dy;
            if y < 0 || y >= h as isize {
                continue;
            }
            for dx in -r..=r {
                let x = cx + dx;
                if x < 0 || x >= w as isize || ((dy * dy + dx * dx) as f64) > r2 {
                    continue;
                }
                band[y as usize * w + x as usize] = true;
            }
        }
    }
    band
}

fn label_plane<T: Real>(t: &Tensor<T>, b: usize) -> Vec<u32> {
    t.plane(b, 0).iter().map(|v| v.as_f64().round().max(0.0) as u32).collect()
}

#[derive(Default)]
struct FlowSums {
    epe: f64,
    outliers: usize,
    count: usize,
    band_epe: f64,
    band_count: usize,
}

/// AEE, outlier rate and, when `labels` are given, the AEE inside the
/// `band_radius` band around label boundaries.
///
/// `valid` is `(n, 1, h, w)`; values `<= 0.5` exclude the pixel.
pub fn eval_flow<T: Real>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    valid: Option<&Tensor<T>>,
    labels: Option<&Tensor<T>>,
    band_radius: f64,
) -> Result<MetricReport> {
    if pred.shape() != gt.shape() || gt.channels() != 2 {
        return Err(Error::shape("eval_flow", gt.shape(), pred.shape()));
    }
    let [n, _, h, w] = gt.shape();
    for (name, m) in [("valid mask", valid), ("labels", labels)] {
        if let Some(m) = m {
            if m.shape() != [n, 1, h, w] {
                return Err(Error::InvalidArgument(format!(
                    "eval_flow {name} has shape {:?}, expected {:?}",
                    m.shape(),
                    [n, 1, h, w]
                )));
            }
        }
    }
    let mut total = FlowSums::default();
    let mut per_image = Vec::with_capacity(n);
    for b in 0..n {
        let band = labels.map(|l| boundary_band(&label_plane(l, b), h, w, band_radius));
        let mut s = FlowSums::default();
        let (pu, pv, gu, gv) = (pred.plane(b, 0), pred.plane(b, 1), gt.plane(b, 0), gt.plane(b, 1));
        for i in 0..h * w {
            if valid.is_some_and(|v| v.plane(b, 0)[i] <= T::of(0.5)) {
                continue;
            }
            let (gx, gy) = (gu[i].as_f64(), gv[i].as_f64());
            let epe = (pu[i].as_f64() - gx).hypot(pv[i].as_f64() - gy);
            s.epe += epe;
            s.count += 1;
            if is_outlier(epe, gx.hypot(gy)) {
                s.outliers += 1;
            }
            if band.as_ref().is_some_and(|band| band[i]) {
                s.band_epe += epe;
                s.band_count += 1;
            }
        }
        per_image.push(ImageMetrics {
            aee: (s.count > 0).then(|| s.epe / s.count as f64),
            outlier_rate_3px: (s.count > 0).then(|| s.outliers as f64 / s.count as f64),
            boundary_aee: (band.is_some() && s.band_count > 0).then(|| s.band_epe / s.band_count as f64),
            miou: None,
        });
        total.epe += s.epe;
        total.count += s.count;
        total.outliers += s.outliers;
        total.band_epe += s.band_epe;
        total.band_count += s.band_count;
    }
    if total.count == 0 {
        return Err(Error::InvalidArgument("eval_flow: valid mask is empty".into()));
    }
    Ok(MetricReport {
        aee: Some(total.epe / total.count as f64),
        outlier_rate_3px: Some(total.outliers as f64 / total.count as f64),
        boundary_aee: (labels.is_some() && total.band_count > 0).then(|| total.band_epe / total.band_count as f64),
        miou: None,
        per_image,
    })
}

/// Pixel-level confusion counts over `classes` classes.
#[derive(Clone, Debug, PartialEq)]
pub struct Confusion {
    classes: usize,
    /// Row: ground truth, column: prediction.
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, gt: usize, pred: usize) {
        self.counts[gt * self.classes + pred] += 1;
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Mean IoU over classes present in the ground truth or the prediction.
    pub fn miou(&self) -> Option<f64> {
        let c = self.classes;
        let mut sum = 0.0;
        let mut present = 0usize;
        for k in 0..c {
            let tp = self.counts[k * c + k];
            let gt: u64 = self.counts[k * c..(k + 1) * c].iter().sum();
            let pred: u64 = (0..c).map(|g| self.counts[g * c + k]).sum();
            let union = gt + pred - tp;
            if union > 0 {
                sum += tp as f64 / union as f64;
                present += 1;
            }
        }
        (present > 0).then(|| sum / present as f64)
    }
}

/// Per-pixel argmax over the channels of `logits`, `(n, 1, h, w)`.
pub fn argmax_channels<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = logits.shape();
    Tensor::from_fn([n, 1, h, w], |b, _, y, x| {
        let mut best = 0;
        for k in 1..c {
            if logits.get(b, k, y, x) > logits.get(b, best, y, x) {
                best = k;
            }
        }
        T::of(best as f64)
    })
}

/// mIoU of the argmax of `pred_logits` against integer `gt_labels`.
pub fn eval_segmentation<T: Real>(
    pred_logits: &Tensor<T>,
    gt_labels: &Tensor<T>,
    ignore_label: u32,
) -> Result<MetricReport> {
    let [n, c, h, w] = pred_logits.shape();
    if gt_labels.shape() != [n, 1, h, w] {
        return Err(Error::shape("eval_segmentation labels", [n, 1, h, w], gt_labels.shape()));
    }
    let pred = argmax_channels(pred_logits);
    let mut total = Confusion::new(c);
    let mut per_image = Vec::with_capacity(n);
    for b in 0..n {
        let mut conf = Confusion::new(c);
        for (g, p) in label_plane(gt_labels, b).into_iter().zip(label_plane(&pred, b)) {
            if g == ignore_label {
                continue;
            }
            if g as usize >= c {
                return Err(Error::InvalidArgument(format!("label {g} out of range for {c} classes")));
            }
            conf.add(g as usize, p as usize);
        }
        per_image.push(ImageMetrics {
            miou: conf.miou(),
            ..Default::default()
        });
        total.merge(&conf);
    }
    if total.total() == 0 {
        return Err(Error::InvalidArgument("eval_segmentation: every pixel is ignored".into()));
    }
    Ok(MetricReport {
        miou: total.miou(),
        per_image,
        ..Default::default()
    })
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flow1(u: f64) -> Tensor<f64> {
        Tensor::from_vec([1, 2, 1, 1], vec![u, 0.0]).unwrap()
    }

    #[test]
    fn identical_flow_is_zero_report() {
        let f = Tensor::<f64>::from_fn([2, 2, 3, 4], |b, c, y, x| (b + c * y) as f64 - x as f64);
        let r = eval_flow(&f, &f, None, None, BOUNDARY_RADIUS).unwrap();
        assert_eq!((r.aee, r.outlier_rate_3px), (Some(0.0), Some(0.0)));
        assert_eq!(r.per_image.len(), 2);
    }

    #[test]
    fn outlier_needs_both_clauses() {
        let r = eval_flow(&flow1(13.1), &flow1(10.0), None, None, BOUNDARY_RADIUS).unwrap();
        assert_eq!(r.outlier_rate_3px, Some(1.0));
        let r = eval_flow(&flow1(104.0), &flow1(100.0), None, None, BOUNDARY_RADIUS).unwrap();
        assert_eq!(r.outlier_rate_3px, Some(0.0));
        assert!((r.aee.unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn empty_valid_mask_is_an_error() {
        let none = Tensor::zeros([1, 1, 1, 1]);
        assert!(eval_flow(&flow1(1.0), &flow1(0.0), Some(&none), None, 10.0).is_err());
    }

    #[test]
    fn miou_hand_count() {
        let gt = Tensor::<f64>::from_vec([1, 1, 2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        // argmax: [0, 1, 1, 1]
        let logits = Tensor::from_vec([1, 2, 2, 2], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let r = eval_segmentation(&logits, &gt, 255).unwrap();
        assert!((r.miou.unwrap() - 7.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn predicted_absent_class_counts_as_zero() {
        let gt = Tensor::<f64>::from_vec([1, 1, 1, 2], vec![0.0, 0.0]).unwrap();
        let logits = Tensor::from_vec([1, 3, 1, 2], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let r = eval_segmentation(&logits, &gt, 255).unwrap();
        // class 0: 1/2, class 2: 0, class 1 absent from both
        assert!((r.miou.unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn band_around_vertical_edge() {
        let labels: Vec<u32> = (0..4 * 8).map(|i| u32::from(i % 8 >= 4)).collect();
        let band = boundary_band(&labels, 4, 8, 1.0);
        let row: Vec<bool> = band[..8].to_vec();
        assert_eq!(row, vec![false, false, true, true, true, true, false, false]);
    }

    #[test]
    fn spearman_of_monotone_pairs() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&a, &[10.0, 20.0, 30.0, 45.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&a, &[4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    }
}
