use rand::Rng;

use super::Task;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// What a refinement network consumes: the backbone's estimate, its
/// log-probabilities and the full-resolution guidance image.
#[derive(Clone, Debug, PartialEq)]
pub struct NetInputs<T: Real> {
    /// Flow `(n, 2, h, w)` or class logits `(n, 21, h, w)`.
    pub estimate: Tensor<T>,
    /// Flow `(n, 5, h, w)` or log-softmax `(n, 21, h, w)`.
    pub log_probability: Tensor<T>,
    /// Normalized RGB `(n, 3, h, w)`.
    pub guidance: Tensor<T>,
}

impl<T: Real> NetInputs<T> {
    pub fn new(estimate: Tensor<T>, log_probability: Tensor<T>, guidance: Tensor<T>) -> Result<Self> {
        let inputs = Self {
            estimate,
            log_probability,
            guidance,
        };
        let [n, _, h, w] = inputs.estimate.shape();
        for (name, t) in [("log_probability", &inputs.log_probability), ("guidance", &inputs.guidance)] {
            let [tn, _, th, tw] = t.shape();
            if (tn, th, tw) != (n, h, w) {
                return Err(Error::InvalidArgument(format!(
                    "{name} is {tn}x{th}x{tw} (batch x height x width) but the estimate is {n}x{h}x{w}"
                )));
            }
        }
        Ok(inputs)
    }

    /// Checks channel counts against `task`.
    pub fn validate(&self, task: Task) -> Result<()> {
        let checks = [
            ("estimate", &self.estimate, task.estimate_channels()),
            ("log_probability", &self.log_probability, task.probability_channels()),
            ("guidance", &self.guidance, 3),
        ];
        for (name, t, c) in checks {
            if t.channels() != c {
                return Err(Error::InvalidArgument(format!(
                    "{name} has {} channels, {} expects {c}",
                    t.channels(),
                    task.tag()
                )));
            }
        }
        Ok(())
    }

    pub fn batch(&self) -> usize {
        self.estimate.batch()
    }

    pub fn spatial(&self) -> (usize, usize) {
        self.estimate.spatial()
    }

    pub fn sample(&self, b: usize) -> Self {
        Self {
            estimate: self.estimate.sample(b),
            log_probability: self.log_probability.sample(b),
            guidance: self.guidance.sample(b),
        }
    }

    pub fn stack(parts: &[NetInputs<T>]) -> Result<Self> {
        let collect = |f: fn(&NetInputs<T>) -> &Tensor<T>| -> Result<Tensor<T>> {
            Tensor::stack(&parts.iter().map(|p| f(p).clone()).collect::<Vec<_>>())
        };
        Ok(Self {
            estimate: collect(|p| &p.estimate)?,
            log_probability: collect(|p| &p.log_probability)?,
            guidance: collect(|p| &p.guidance)?,
        })
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        Ok(Self {
            estimate: self.estimate.crop(y0, x0, h, w)?,
            log_probability: self.log_probability.crop(y0, x0, h, w)?,
            guidance: self.guidance.crop(y0, x0, h, w)?,
        })
    }

    pub fn cast<U: Real>(&self) -> NetInputs<U> {
        NetInputs {
            estimate: self.estimate.cast(),
            log_probability: self.log_probability.cast(),
            guidance: self.guidance.cast(),
        }
    }

    /// Random inputs of the right layout, for tests and gradient checks.
    pub fn random<R: Rng>(task: Task, n: usize, h: usize, w: usize, rng: &mut R) -> Self {
        let mut gen = |c: usize, lo: f64, hi: f64| Tensor::from_fn([n, c, h, w], |_, _, _, _| T::of(rng.gen_range(lo..hi)));
        let estimate = gen(task.estimate_channels(), -3.0, 3.0);
        let log_probability = gen(task.probability_channels(), -3.0, 0.0);
        let guidance = gen(3, -1.0, 1.0);
        Self {
            estimate,
            log_probability,
            guidance,
        }
    }
}

/// Guard added to the endpoint error before inversion; caps the oracle
/// confidence at 100.
pub const ORACLE_EPSILON: f64 = 1e-2;

/// Per-pixel `1 / (epe + 0.01)` of `estimate` against `ground_truth`, `(n, 1, h, w)`.
pub fn oracle_confidence<T: Real>(estimate: &Tensor<T>, ground_truth: &Tensor<T>) -> Result<Tensor<T>> {
    if estimate.shape() != ground_truth.shape() || estimate.channels() != 2 {
        return Err(Error::shape("oracle_confidence", estimate.shape(), ground_truth.shape()));
    }
    let [n, _, h, w] = estimate.shape();
    Ok(Tensor::from_fn([n, 1, h, w], |b, _, y, x| {
        let du = (estimate.get(b, 0, y, x) - ground_truth.get(b, 0, y, x)).as_f64();
        let dv = (estimate.get(b, 1, y, x) - ground_truth.get(b, 1, y, x)).as_f64();
        T::of(1.0 / ((du * du + dv * dv).sqrt() + ORACLE_EPSILON))
    }))
}

/// The log of [`oracle_confidence`] repeated over `channels`, shaped like the
/// probability-branch input it replaces.
pub fn oracle_log_probability<T: Real>(
    estimate: &Tensor<T>,
    ground_truth: &Tensor<T>,
    channels: usize,
) -> Result<Tensor<T>> {
    let conf = oracle_confidence(estimate, ground_truth)?.map(|c| c.ln());
    Tensor::concat_channels(&vec![&conf; channels])
}
