//! Synthetic scenes: Voronoi objects with piecewise-constant motion (or
//! classes), a degraded estimate with blurred boundaries and outlier blobs,
//! and a confidence map that is low exactly where the estimate is bad.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::net::{NetInputs, Task};
use crate::tensor::{Real, Tensor};
use crate::train::Target;

/// Largest per-object motion component.
pub const MAX_FLOW: f64 = 8.0;
/// Logit given to the true class of a clean segmentation estimate.
const LOGIT_SCALE: f64 = 4.0;
/// Guidance texture amplitude in 8-bit levels.
const TEXTURE_LEVELS: i32 = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub n_objects: usize,
    /// Target fraction of pixels covered by outlier blobs.
    pub outlier_density: f64,
    /// Box-blur radius applied to the ground truth.
    pub blur_radius: usize,
    pub task: Task,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 96,
            width: 128,
            n_objects: 5,
            outlier_density: 0.05,
            blur_radius: 2,
            task: Task::Flow,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_objects < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 objects, got {}", self.n_objects)));
        }
        if self.height < 32 || self.width < 32 {
            return Err(Error::InvalidArgument(format!(
                "scenes must be at least 32x32, got {}x{}",
                self.height, self.width
            )));
        }
        if !(0.0..0.5).contains(&self.outlier_density) {
            return Err(Error::InvalidArgument(format!(
                "outlier density must lie in [0, 0.5), got {}",
                self.outlier_density
            )));
        }
        if self.task == Task::Segmentation && self.n_objects > 255 {
            return Err(Error::InvalidArgument("at most 255 objects".into()));
        }
        Ok(())
    }
}

/// One generated scene, all tensors `(1, c, h, w)` in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub task: Task,
    /// 8-bit RGB, row-major interleaved, the source of `guidance`.
    pub rgb: Vec<u8>,
    /// Normalized guidance image, `(rgb / 255 - 0.5) / 0.25`.
    pub guidance: Tensor<f64>,
    /// Object index per pixel.
    pub labels: Tensor<f64>,
    /// Flow `(1, 2, h, w)` or class map `(1, 1, h, w)`.
    pub gt_field: Tensor<f64>,
    /// Degraded flow, or class logits `(1, 21, h, w)`.
    pub corrupted: Tensor<f64>,
    pub confidence: Tensor<f64>,
    pub log_prob_stack: Tensor<f64>,
    /// Pixels inside outlier blobs.
    pub outlier_mask: Vec<bool>,
}

impl SyntheticScene {
    pub fn height(&self) -> usize {
        self.guidance.height()
    }

    pub fn width(&self) -> usize {
        self.guidance.width()
    }

    pub fn inputs<T: Real>(&self) -> NetInputs<T> {
        NetInputs {
            estimate: self.corrupted.cast(),
            log_probability: self.log_prob_stack.cast(),
            guidance: self.guidance.cast(),
        }
    }

    pub fn target<T: Real>(&self) -> Target<T> {
        match self.task {
            Task::Flow => Target::Flow {
                gt: self.gt_field.cast(),
                valid: None,
            },
            Task::Segmentation => Target::Labels(self.gt_field.cast()),
        }
    }
}

/// Normalizes 8-bit interleaved RGB into the `(1, 3, h, w)` guidance layout.
pub fn guidance_from_rgb(rgb: &[u8], h: usize, w: usize) -> Result<Tensor<f64>> {
    if rgb.len() != h * w * 3 {
        return Err(Error::shape("guidance_from_rgb", h * w * 3, rgb.len()));
    }
    Ok(Tensor::from_fn([1, 3, h, w], |_, c, y, x| {
        (rgb[(y * w + x) * 3 + c] as f64 / 255.0 - 0.5) / 0.25
    }))
}

/// Mean over the in-image part of a `(2r+1)^2` window, per plane.
fn box_blur(plane: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    if r == 0 {
        return plane.to_vec();
    }
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (pos, len) = if horizontal { (x, w) } else { (y, h) };
                let lo = pos.saturating_sub(r);
                let hi = (pos + r).min(len - 1);
                let mut s = 0.0;
                for k in lo..=hi {
                    s += if horizontal { src[y * w + k] } else { src[k * w + x] };
                }
                out[y * w + x] = s / (hi - lo + 1) as f64;
            }
        }
        out
    };
    pass(&pass(plane, true), false)
}

fn distinct_colors(rng: &mut ChaCha8Rng, n: usize) -> Vec<[u8; 3]> {
    let mut colors: Vec<[u8; 3]> = Vec::with_capacity(n);
    let mut min_gap = 96i32;
    while colors.len() < n {
        let mut found = None;
        for _ in 0..200 {
            let c = [rng.gen_range(24..232u8), rng.gen_range(24..232u8), rng.gen_range(24..232u8)];
            let far = colors.iter().all(|o| {
                o.iter().zip(&c).map(|(a, b)| (*a as i32 - *b as i32).abs()).max().unwrap_or(255) >= min_gap
            });
            if far {
                found = Some(c);
                break;
            }
        }
        match found {
            Some(c) => colors.push(c),
            None => min_gap = (min_gap * 3 / 4).max(1),
        }
    }
    colors
}

/// Deterministic scene for `seed`.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<SyntheticScene> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let hw = h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let sites: Vec<(f64, f64)> = (0..spec.n_objects)
        .map(|_| (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64)))
        .collect();
    let object: Vec<usize> = (0..hw)
        .map(|i| {
            let (y, x) = ((i / w) as f64 + 0.5, (i % w) as f64 + 0.5);
            let d = |s: &(f64, f64)| (s.0 - y).powi(2) + (s.1 - x).powi(2);
            (0..sites.len())
                .min_by(|&a, &b| d(&sites[a]).total_cmp(&d(&sites[b])))
                .expect("at least two objects")
        })
        .collect();

    let colors = distinct_colors(&mut rng, spec.n_objects);
    let mut rgb = vec![0u8; hw * 3];
    for i in 0..hw {
        for c in 0..3 {
            let noise = rng.gen_range(-TEXTURE_LEVELS..=TEXTURE_LEVELS);
            rgb[i * 3 + c] = (colors[object[i]][c] as i32 + noise).clamp(0, 255) as u8;
        }
    }
    let guidance = guidance_from_rgb(&rgb, h, w)?;
    let labels = Tensor::from_vec([1, 1, h, w], object.iter().map(|&o| o as f64).collect())?;

    // Clean per-pixel field planes and per-object values.
    let (clean_planes, classes): (Vec<Vec<f64>>, Vec<usize>) = match spec.task {
        Task::Flow => {
            let motion: Vec<[f64; 2]> = (0..spec.n_objects)
                .map(|_| [rng.gen_range(-MAX_FLOW..=MAX_FLOW), rng.gen_range(-MAX_FLOW..=MAX_FLOW)])
                .collect();
            let planes = (0..2).map(|c| object.iter().map(|&o| motion[o][c]).collect()).collect();
            (planes, Vec::new())
        }
        Task::Segmentation => {
            let k = Task::Segmentation.estimate_channels();
            let classes: Vec<usize> = (0..spec.n_objects).map(|_| rng.gen_range(0..k)).collect();
            let planes = (0..k)
                .map(|c| object.iter().map(|&o| f64::from(u8::from(classes[o] == c))).collect())
                .collect();
            (planes, classes)
        }
    };
    let blurred: Vec<Vec<f64>> = clean_planes.iter().map(|p| box_blur(p, h, w, spec.blur_radius)).collect();

    // Outlier discs until the requested coverage is reached.
    let mut outlier = vec![false; hw];
    let mut blob_values: Vec<Option<Vec<f64>>> = vec![None; hw];
    let target = (spec.outlier_density * hw as f64).ceil() as usize;
    let mut covered = 0usize;
    while covered < target {
        let radius = rng.gen_range(1..=3) as isize;
        let (cy, cx) = (rng.gen_range(0..h) as isize, rng.gen_range(0..w) as isize);
        let value: Vec<f64> = match spec.task {
            Task::Flow => vec![rng.gen_range(-MAX_FLOW..=MAX_FLOW), rng.gen_range(-MAX_FLOW..=MAX_FLOW)],
            Task::Segmentation => {
                let k = Task::Segmentation.estimate_channels();
                let c = rng.gen_range(0..k);
                (0..k).map(|j| f64::from(u8::from(j == c))).collect()
            }
        };
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let (y, x) = (cy + dy, cx + dx);
                if dy * dy + dx * dx > radius * radius || y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                    continue;
                }
                let i = y as usize * w + x as usize;
                if !outlier[i] {
                    outlier[i] = true;
                    covered += 1;
                }
                blob_values[i] = Some(value.clone());
            }
        }
    }

    let mut confidence = vec![0.0; hw];
    let channels = clean_planes.len();
    let mut corrupted_planes = blurred.clone();
    for i in 0..hw {
        if let Some(v) = &blob_values[i] {
            for c in 0..channels {
                corrupted_planes[c][i] = v[c];
            }
            confidence[i] = 0.05 + 0.1 * rng.gen::<f64>();
        } else {
            let err = match spec.task {
                Task::Flow => (blurred[0][i] - clean_planes[0][i]).hypot(blurred[1][i] - clean_planes[1][i]),
                Task::Segmentation => 1.0 - blurred[classes[object[i]]][i],
            };
            confidence[i] = 0.8 + 0.2 * (-err).exp();
        }
    }

    let (gt_field, corrupted) = match spec.task {
        Task::Flow => (
            Tensor::from_vec([1, 2, h, w], clean_planes.concat())?,
            Tensor::from_vec([1, 2, h, w], corrupted_planes.concat())?,
        ),
        Task::Segmentation => {
            let gt = Tensor::from_vec([1, 1, h, w], object.iter().map(|&o| classes[o] as f64).collect())?;
            let logits: Vec<f64> = corrupted_planes.concat().into_iter().map(|v| v * LOGIT_SCALE).collect();
            (gt, Tensor::from_vec([1, channels, h, w], logits)?)
        }
    };

    let log_prob_stack = match spec.task {
        Task::Flow => {
            let k = Task::Flow.probability_channels();
            let mut data = Vec::with_capacity(k * hw);
            for c in 0..k {
                let amp = 0.15 * c as f64;
                for &conf in &confidence {
                    let noise = if amp > 0.0 { rng.gen_range(-amp..=amp) } else { 0.0 };
                    data.push((conf.ln() + noise).min(0.0));
                }
            }
            Tensor::from_vec([1, k, h, w], data)?
        }
        Task::Segmentation => log_softmax(&corrupted),
    };

    Ok(SyntheticScene {
        task: spec.task,
        rgb,
        guidance,
        labels,
        gt_field,
        corrupted,
        confidence: Tensor::from_vec([1, 1, h, w], confidence)?,
        log_prob_stack,
        outlier_mask: outlier,
    })
}

/// Channel-wise log-softmax.
pub fn log_softmax<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = logits.shape();
    let mut out = logits.clone();
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let max = (0..c).map(|k| logits.get(b, k, y, x).as_f64()).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..c).map(|k| (logits.get(b, k, y, x).as_f64() - max).exp()).sum::<f64>().ln();
                for k in 0..c {
                    out.set(b, k, y, x, T::of(logits.get(b, k, y, x).as_f64() - lse));
                }
            }
        }
    }
    out
}
