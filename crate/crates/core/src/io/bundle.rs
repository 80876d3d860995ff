//! Scene bundles on disk: one directory per scene plus a manifest.
//!
//! ```text
//! manifest.txt        key=value header, then one `scene=<dir>` line per scene
//! scene_0000/
//!   guidance.png      8-bit RGB
//!   labels.png        object index per pixel
//!   gt.flo | gt.png   flow, or class map
//!   estimate.flo | estimate.c<k>.pfm
//!   confidence.pfm
//!   logprob.c<k>.pfm
//! ```

use std::path::{Path, PathBuf};

use super::config::ConfidenceSource;
use super::flo::{read_flo, write_flo};
use super::pfm::{read_channels, read_pfm, write_channels, write_pfm};
use super::raster::{read_gray, read_rgb, write_gray, write_rgb};
use crate::data::{generate_scene, guidance_from_rgb, SceneSpec, SyntheticScene};
use crate::error::{Error, Result};
use crate::net::{oracle_log_probability, NetInputs, Task};
use crate::tensor::{Real, Tensor};
use crate::train::{Sample, Target};

pub const MANIFEST_NAME: &str = "manifest.txt";

fn u8_plane(t: &Tensor<f64>, what: &str) -> Result<Vec<u8>> {
    t.plane(0, 0)
        .iter()
        .map(|&v| {
            if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                Ok(v as u8)
            } else {
                Err(Error::InvalidArgument(format!("{what} value {v} does not fit an 8-bit map")))
            }
        })
        .collect()
}

fn gray_tensor<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let (v, h, w) = read_gray(path)?;
    Tensor::from_vec([1, 1, h, w], v.into_iter().map(|x| T::of(x as f64)).collect())
}

pub fn write_scene(dir: impl AsRef<Path>, scene: &SyntheticScene) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = (scene.height(), scene.width());
    write_rgb(dir.join("guidance.png"), &scene.rgb, h, w)?;
    write_gray(dir.join("labels.png"), &u8_plane(&scene.labels, "label")?, h, w)?;
    match scene.task {
        Task::Flow => {
            write_flo(dir.join("gt.flo"), &scene.gt_field)?;
            write_flo(dir.join("estimate.flo"), &scene.corrupted)?;
        }
        Task::Segmentation => {
            write_gray(dir.join("gt.png"), &u8_plane(&scene.gt_field, "class")?, h, w)?;
            write_channels(dir.join("estimate"), &scene.corrupted)?;
        }
    }
    write_pfm(dir.join("confidence.pfm"), &scene.confidence, 0, 0)?;
    write_channels(dir.join("logprob"), &scene.log_prob_stack)
}

/// A scene read back from disk.
#[derive(Clone, Debug)]
pub struct LoadedScene<T: Real> {
    pub inputs: NetInputs<T>,
    /// Flow `(1, 2, h, w)` or class map `(1, 1, h, w)`.
    pub ground_truth: Tensor<T>,
    pub labels: Tensor<T>,
    pub confidence: Tensor<T>,
}

impl<T: Real> LoadedScene<T> {
    pub fn sample(&self, task: Task, source: ConfidenceSource) -> Result<Sample<T>> {
        let mut inputs = self.inputs.clone();
        if source == ConfidenceSource::Oracle {
            inputs.log_probability =
                oracle_log_probability(&inputs.estimate, &self.ground_truth, task.probability_channels())?;
        }
        let target = match task {
            Task::Flow => Target::Flow {
                gt: self.ground_truth.clone(),
                valid: None,
            },
            Task::Segmentation => Target::Labels(self.ground_truth.clone()),
        };
        Ok(Sample { inputs, target })
    }
}

/// Reads the estimate written for `task` from a scene directory.
pub fn read_estimate<T: Real>(dir: &Path, task: Task) -> Result<Tensor<T>> {
    match task {
        Task::Flow => read_flo(dir.join("estimate.flo")),
        Task::Segmentation => read_channels(dir.join("estimate"), task.estimate_channels()),
    }
}

pub fn read_guidance<T: Real>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let (rgb, h, w) = read_rgb(path)?;
    Ok(guidance_from_rgb(&rgb, h, w)?.cast())
}

pub fn read_scene<T: Real>(dir: impl AsRef<Path>, task: Task) -> Result<LoadedScene<T>> {
    let dir = dir.as_ref();
    let guidance = read_guidance(dir.join("guidance.png"))?;
    let estimate = read_estimate(dir, task)?;
    let log_probability = read_channels(dir.join("logprob"), task.probability_channels())?;
    let ground_truth = match task {
        Task::Flow => read_flo(dir.join("gt.flo"))?,
        Task::Segmentation => gray_tensor(&dir.join("gt.png"))?,
    };
    let labels = gray_tensor(&dir.join("labels.png"))?;
    let confidence = read_pfm(dir.join("confidence.pfm"))?;
    let inputs = NetInputs::new(estimate, log_probability, guidance)?;
    for (name, t) in [("gt", &ground_truth), ("labels", &labels), ("confidence", &confidence)] {
        if t.spatial() != inputs.spatial() {
            return Err(Error::InvalidArgument(format!(
                "{}: {name} is {:?}, the estimate is {:?}",
                dir.display(),
                t.spatial(),
                inputs.spatial()
            )));
        }
    }
    Ok(LoadedScene {
        inputs,
        ground_truth,
        labels,
        confidence,
    })
}

/// Generator settings plus the scene directories (relative to the manifest).
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub spec: SceneSpec,
    pub seed: u64,
    pub scenes: Vec<PathBuf>,
}

impl Manifest {
    pub fn render(&self) -> String {
        let s = &self.spec;
        let mut out = format!(
            "# synthetic scene manifest\ntask={}\nheight={}\nwidth={}\nn_objects={}\noutlier_density={}\nblur_radius={}\nseed={}\ncount={}\n",
            s.task.tag(),
            s.height,
            s.width,
            s.n_objects,
            s.outlier_density,
            s.blur_radius,
            self.seed,
            self.scenes.len()
        );
        for p in &self.scenes {
            out.push_str(&format!("scene={}\n", p.display()));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |m: String| Error::format("manifest", m);
        let mut spec = SceneSpec::default();
        let mut seed = 0;
        let mut count = None;
        let mut scenes = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("not key=value: `{line}`")))?;
            let num_err = |_| bad(format!("bad value for {k}: `{v}`"));
            let float_err = |_| bad(format!("bad value for {k}: `{v}`"));
            match k {
                "task" => spec.task = v.parse()?,
                "height" => spec.height = v.parse().map_err(num_err)?,
                "width" => spec.width = v.parse().map_err(num_err)?,
                "n_objects" => spec.n_objects = v.parse().map_err(num_err)?,
                "outlier_density" => spec.outlier_density = v.parse().map_err(float_err)?,
                "blur_radius" => spec.blur_radius = v.parse().map_err(num_err)?,
                "seed" => seed = v.parse().map_err(num_err)?,
                "count" => count = Some(v.parse::<usize>().map_err(num_err)?),
                "scene" => scenes.push(PathBuf::from(v)),
                _ => return Err(bad(format!("unknown key `{k}`"))),
            }
        }
        if let Some(c) = count {
            if c != scenes.len() {
                return Err(bad(format!("count={c} but {} scenes are listed", scenes.len())));
            }
        }
        Ok(Self { spec, seed, scenes })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Reads every listed scene, resolving paths against `manifest_dir`.
    pub fn read_scenes<T: Real>(&self, manifest_dir: &Path) -> Result<Vec<LoadedScene<T>>> {
        self.scenes
            .iter()
            .map(|p| read_scene(manifest_dir.join(p), self.spec.task))
            .collect()
    }
}

/// Seed of scene `index` in a bundle generated with `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

/// Generates `count` scenes under `out` and writes the manifest.
pub fn generate_bundle(out: impl AsRef<Path>, count: usize, spec: &SceneSpec, seed: u64) -> Result<Manifest> {
    let out = out.as_ref();
    spec.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut scenes = Vec::with_capacity(count);
    for i in 0..count {
        let name = PathBuf::from(format!("scene_{i:04}"));
        write_scene(out.join(&name), &generate_scene(spec, scene_seed(seed, i))?)?;
        scenes.push(name);
    }
    let manifest = Manifest {
        spec: spec.clone(),
        seed,
        scenes,
    };
    let path = out.join(MANIFEST_NAME);
    std::fs::write(&path, manifest.render()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
