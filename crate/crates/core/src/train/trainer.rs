use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{adam_step, aee_loss, cross_entropy_loss, LossKind, LrSchedule, IGNORE_LABEL};
use crate::data::metrics::{argmax_channels, Confusion};
use crate::error::{Error, Result};
use crate::net::{NetInputs, RefinementNet, Task};
use crate::tensor::{random_crop_with, Real, Tensor};

/// Supervision for one sample.
#[derive(Clone, Debug, PartialEq)]
pub enum Target<T: Real> {
    Flow {
        gt: Tensor<T>,
        /// `(1, 1, h, w)`; `None` means every pixel is valid.
        valid: Option<Tensor<T>>,
    },
    /// Integer class ids `(1, 1, h, w)`.
    Labels(Tensor<T>),
}

impl<T: Real> Target<T> {
    fn tensors(&self) -> Vec<&Tensor<T>> {
        match self {
            Target::Flow { gt, valid } => std::iter::once(gt).chain(valid.as_ref()).collect(),
            Target::Labels(l) => vec![l],
        }
    }

    fn rebuild(&self, mut parts: Vec<Tensor<T>>) -> Self {
        match self {
            Target::Flow { valid, .. } => {
                let v = valid.as_ref().map(|_| parts.pop().expect("valid part"));
                Target::Flow {
                    gt: parts.pop().expect("gt part"),
                    valid: v,
                }
            }
            Target::Labels(_) => Target::Labels(parts.pop().expect("label part")),
        }
    }

    fn stack(targets: &[Target<T>]) -> Result<Self> {
        match &targets[0] {
            Target::Flow { valid, .. } => {
                let mut gts = Vec::new();
                let mut vs = Vec::new();
                for t in targets {
                    match t {
                        Target::Flow { gt, valid: v } => {
                            gts.push(gt.clone());
                            if let Some(v) = v {
                                vs.push(v.clone());
                            }
                        }
                        Target::Labels(_) => return Err(Error::InvalidArgument("mixed targets in batch".into())),
                    }
                }
                if valid.is_some() && vs.len() != gts.len() {
                    return Err(Error::InvalidArgument("valid masks must be given for all samples or none".into()));
                }
                Ok(Target::Flow {
                    gt: Tensor::stack(&gts)?,
                    valid: valid.as_ref().map(|_| Tensor::stack(&vs)).transpose()?,
                })
            }
            Target::Labels(_) => {
                let ls = targets
                    .iter()
                    .map(|t| match t {
                        Target::Labels(l) => Ok(l.clone()),
                        Target::Flow { .. } => Err(Error::InvalidArgument("mixed targets in batch".into())),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Target::Labels(Tensor::stack(&ls)?))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T: Real> {
    pub inputs: NetInputs<T>,
    pub target: Target<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub schedule: LrSchedule,
    pub epochs: usize,
    pub batch: usize,
    /// Random crop `(h, w)` applied per sample and step; `None` trains on full images.
    pub crop: Option<(usize, usize)>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// AEE (flow) or mIoU (segmentation) on the validation set.
    pub val_metric: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Real> {
    pub log: Vec<EpochLog>,
    /// Epoch whose parameters are in `best_params`; `None` without validation data or epochs.
    pub best_epoch: Option<usize>,
    pub best_metric: Option<f64>,
    pub best_params: Vec<Tensor<T>>,
}

/// Validation metric direction: AEE is minimized, mIoU maximized.
fn better(task: Task, candidate: f64, best: f64) -> bool {
    match task {
        Task::Flow => candidate < best,
        Task::Segmentation => candidate > best,
    }
}

fn batch_loss<T: Real>(kind: LossKind, out: &Tensor<T>, target: &Target<T>) -> Result<(f64, Tensor<T>)> {
    match (kind, target) {
        (LossKind::Aee, Target::Flow { gt, valid }) => aee_loss(out, gt, valid.as_ref()),
        (LossKind::CrossEntropy, Target::Labels(l)) => cross_entropy_loss(out, l, IGNORE_LABEL),
        _ => Err(Error::InvalidArgument(format!("loss {kind:?} does not match the target type"))),
    }
}

/// Pixel-weighted AEE (flow) or pooled mIoU (segmentation) of `net` on `samples`.
pub fn evaluate<T: Real>(net: &RefinementNet<T>, samples: &[Sample<T>]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("evaluate: no samples".into()));
    }
    match net.task() {
        Task::Flow => {
            let (mut sum, mut count) = (0.0, 0usize);
            for s in samples {
                let out = net.forward(&s.inputs)?;
                let Target::Flow { gt, valid } = &s.target else {
                    return Err(Error::InvalidArgument("flow network needs flow targets".into()));
                };
                let n = valid.as_ref().map_or(gt.plane_len(), |v| {
                    v.data().iter().filter(|x| **x > T::of(0.5)).count()
                });
                if n > 0 {
                    sum += aee_loss(&out, gt, valid.as_ref())?.0 * n as f64;
                    count += n;
                }
            }
            if count == 0 {
                return Err(Error::InvalidArgument("evaluate: no valid pixels".into()));
            }
            Ok(sum / count as f64)
        }
        Task::Segmentation => {
            let mut conf = Confusion::new(net.task().estimate_channels());
            for s in samples {
                let pred = argmax_channels(&net.forward(&s.inputs)?);
                let Target::Labels(l) = &s.target else {
                    return Err(Error::InvalidArgument("segmentation network needs label targets".into()));
                };
                for (g, p) in l.data().iter().zip(pred.data()) {
                    let g = g.as_f64().round() as u32;
                    if g != IGNORE_LABEL {
                        conf.add(g as usize, p.as_f64() as usize);
                    }
                }
            }
            conf.miou()
                .ok_or_else(|| Error::InvalidArgument("evaluate: every pixel is ignored".into()))
        }
    }
}

/// Mini-batch Adam training.
///
/// Deterministic for a given `cfg.seed`. The network ends with its final
/// parameters; the best-on-validation snapshot (earliest on ties) is
/// returned in the outcome.
pub fn train_epochs<T: Real>(
    net: &mut RefinementNet<T>,
    train: &[Sample<T>],
    val: Option<&[Sample<T>]>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    net.params_mut().set_lr_scales(1.0, cfg.schedule.combination_scale());
    let mut outcome = TrainOutcome {
        log: Vec::with_capacity(cfg.epochs),
        best_epoch: None,
        best_metric: None,
        best_params: net.params().snapshot(),
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch) {
            let mut inputs = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &train[i];
                match cfg.crop {
                    Some((ch, cw)) => {
                        let mut all = vec![&s.inputs.estimate, &s.inputs.log_probability, &s.inputs.guidance];
                        let target_parts = s.target.tensors();
                        all.extend(target_parts.iter().copied());
                        let mut cropped = random_crop_with(&all, ch, cw, &mut rng)?;
                        let rest = cropped.split_off(3);
                        let mut it = cropped.into_iter();
                        inputs.push(NetInputs {
                            estimate: it.next().expect("estimate"),
                            log_probability: it.next().expect("log_probability"),
                            guidance: it.next().expect("guidance"),
                        });
                        targets.push(s.target.rebuild(rest));
                    }
                    None => {
                        inputs.push(s.inputs.clone());
                        targets.push(s.target.clone());
                    }
                }
            }
            let batch_inputs = NetInputs::stack(&inputs)?;
            let batch_target = Target::stack(&targets)?;
            let (out, cache) = net.forward_train(&batch_inputs)?;
            let (loss, grad) = batch_loss(cfg.loss, &out, &batch_target)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            net.params_mut().zero_grads();
            net.backward(&cache, &grad)?;
            adam_step(net.params_mut(), lr).map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged { epoch, loss: f64::NAN },
                other => other,
            })?;
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        let val_metric = match val {
            Some(v) if !v.is_empty() => Some(evaluate(net, v)?),
            _ => None,
        };
        if let Some(m) = val_metric {
            if outcome.best_metric.is_none_or(|b| better(net.task(), m, b)) {
                outcome.best_metric = Some(m);
                outcome.best_epoch = Some(epoch);
                outcome.best_params = net.params().snapshot();
            }
        }
        outcome.log.push(EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / seen as f64,
            val_metric,
        });
    }
    if outcome.best_epoch.is_none() {
        outcome.best_params = net.params().snapshot();
    }
    Ok(outcome)
}
