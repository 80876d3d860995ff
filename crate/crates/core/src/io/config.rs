//! `key = value` run configuration files.

use std::path::{Path, PathBuf};

use crate::adaptive::NormalizationMode;
use crate::error::{Error, Result};
use crate::net::{NetKind, Task};
use crate::train::{LossKind, LrSchedule, TrainConfig};

/// Where the probability branch gets its input from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConfidenceSource {
    /// The scene's log-probability stack.
    Learned,
    /// `log(1 / (epe + 0.01))` from the ground truth.
    Oracle,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub kind: NetKind,
    pub epochs: usize,
    pub batch: usize,
    pub base_lr: f64,
    pub lr_combination: Option<f64>,
    pub halve_every: usize,
    /// Both zero disables cropping.
    pub crop_h: usize,
    pub crop_w: usize,
    pub seed: u64,
    pub normalization_mode: NormalizationMode,
    /// `None` uses the precision default.
    pub epsilon_denom: Option<f64>,
    pub confidence_source: ConfidenceSource,
    /// Manifest of the training scenes.
    pub train: PathBuf,
    pub val: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::Flow,
            kind: NetKind::Ppac,
            epochs: 100,
            batch: 8,
            base_lr: 1e-3,
            lr_combination: None,
            halve_every: 100,
            crop_h: 64,
            crop_w: 64,
            seed: 0,
            normalization_mode: NormalizationMode::Advanced,
            epsilon_denom: None,
            confidence_source: ConfidenceSource::Learned,
            train: PathBuf::new(),
            val: None,
            out_dir: PathBuf::from("run"),
        }
    }
}

fn config_err(key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        message: message.into(),
    }
}

fn number<N: std::str::FromStr>(key: &str, value: &str) -> Result<N> {
    value.parse().map_err(|_| config_err(key, format!("`{value}` is not a valid number")))
}

fn positive_int(key: &str, value: &str) -> Result<usize> {
    let v: usize = number(key, value)?;
    if v == 0 {
        return Err(config_err(key, "must be positive"));
    }
    Ok(v)
}

fn positive_real(key: &str, value: &str) -> Result<f64> {
    let v: f64 = number(key, value)?;
    if !(v > 0.0 && v.is_finite()) {
        return Err(config_err(key, format!("must be a positive finite number, got {value}")));
    }
    Ok(v)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        let mut has_train = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(config_err(line, format!("line {} is not `key = value`", lineno + 1)));
            };
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(config_err(key, "given more than once"));
            }
            match key {
                "task" => cfg.task = value.parse().map_err(|e: Error| config_err(key, e.to_string()))?,
                "kind" => cfg.kind = value.parse().map_err(|e: Error| config_err(key, e.to_string()))?,
                "normalization_mode" => cfg.normalization_mode = value.parse().map_err(|e: Error| config_err(key, e.to_string()))?,
                "epochs" => cfg.epochs = number(key, value)?,
                "batch" => cfg.batch = positive_int(key, value)?,
                "base_lr" => cfg.base_lr = positive_real(key, value)?,
                "lr_combination" => cfg.lr_combination = Some(positive_real(key, value)?),
                "halve_every" => cfg.halve_every = positive_int(key, value)?,
                "crop_h" => cfg.crop_h = number(key, value)?,
                "crop_w" => cfg.crop_w = number(key, value)?,
                "seed" => cfg.seed = number(key, value)?,
                "epsilon_denom" => cfg.epsilon_denom = Some(positive_real(key, value)?),
                "confidence_source" => {
                    cfg.confidence_source = match value {
                        "learned" => ConfidenceSource::Learned,
                        "oracle" => ConfidenceSource::Oracle,
                        _ => return Err(config_err(key, format!("expected learned|oracle, got `{value}`"))),
                    }
                }
                "train" => {
                    cfg.train = PathBuf::from(value);
                    has_train = true;
                }
                "val" => cfg.val = Some(PathBuf::from(value)),
                "out_dir" => cfg.out_dir = PathBuf::from(value),
                _ => return Err(config_err(key, "unknown key")),
            }
        }
        if !has_train {
            return Err(config_err("train", "required"));
        }
        if (cfg.crop_h == 0) != (cfg.crop_w == 0) {
            return Err(config_err("crop_h", "crop_h and crop_w must both be zero or both positive"));
        }
        if cfg.confidence_source == ConfidenceSource::Oracle && cfg.task != Task::Flow {
            return Err(config_err("confidence_source", "oracle confidences exist for flow only"));
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn crop(&self) -> Option<(usize, usize)> {
        (self.crop_h > 0).then_some((self.crop_h, self.crop_w))
    }

    pub fn schedule(&self) -> LrSchedule {
        let s = LrSchedule::halving(self.base_lr, self.halve_every);
        match self.lr_combination {
            Some(c) => s.with_combination_lr(c),
            None => s,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            loss: match self.task {
                Task::Flow => LossKind::Aee,
                Task::Segmentation => LossKind::CrossEntropy,
            },
            schedule: self.schedule(),
            epochs: self.epochs,
            batch: self.batch,
            crop: self.crop(),
            seed: self.seed,
        }
    }
}
