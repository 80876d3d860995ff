//! Refinement networks: a guidance branch turning the image into pixel
//! features, an optional probability branch turning log-probabilities into
//! confidences, and a combination branch filtering the estimate with both.

mod inputs;

pub use inputs::{oracle_confidence, oracle_log_probability, NetInputs, ORACLE_EPSILON};

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adaptive::{
    adaptive_conv_backward, adaptive_conv_forward, conv2d_backward, conv2d_forward, Activation,
    AdaptiveConvConfig, AdaptiveKernelParams, ConvCache, ConvParams, ForwardCache, NormalizationMode,
};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::train::{ParamGroup, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NetKind {
    /// Confidence- and content-adaptive combination.
    Ppac,
    /// Content-adaptive combination; log-probabilities join the guidance input.
    Pac,
    /// Three plain convolutions over the concatenated inputs, added onto the estimate.
    Simple,
}

impl NetKind {
    pub fn tag(self) -> &'static str {
        match self {
            NetKind::Ppac => "ppac",
            NetKind::Pac => "pac",
            NetKind::Simple => "simple",
        }
    }
}

impl std::str::FromStr for NetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ppac" => Ok(NetKind::Ppac),
            "pac" => Ok(NetKind::Pac),
            "simple" => Ok(NetKind::Simple),
            other => Err(Error::InvalidArgument(format!(
                "unknown network kind `{other}` (expected ppac|pac|simple)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Flow,
    Segmentation,
}

impl Task {
    pub fn tag(self) -> &'static str {
        match self {
            Task::Flow => "flow",
            Task::Segmentation => "seg",
        }
    }

    pub fn estimate_channels(self) -> usize {
        match self {
            Task::Flow => 2,
            Task::Segmentation => 21,
        }
    }

    pub fn probability_channels(self) -> usize {
        match self {
            Task::Flow => 5,
            Task::Segmentation => 21,
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flow" => Ok(Task::Flow),
            "seg" | "segmentation" => Ok(Task::Segmentation),
            other => Err(Error::InvalidArgument(format!("unknown task `{other}` (expected flow|seg)"))),
        }
    }
}

const GUIDANCE_FEATURES: usize = 10;
const ADAPTIVE_LAYERS: usize = 2;
const BRANCH_KERNEL: usize = 5;
const COMBINATION_KERNEL: usize = 7;

#[derive(Clone, Debug)]
struct DenseLayer {
    weight: ParamId,
    bias: ParamId,
    activation: Activation,
}

#[derive(Clone, Debug)]
struct AdaptiveLayer {
    weight: ParamId,
    log_norm_weight: ParamId,
    bias: ParamId,
    features: Range<usize>,
    confidence: Option<usize>,
}

#[derive(Clone, Debug)]
enum Combination {
    Adaptive(Vec<AdaptiveLayer>),
    Dense(Vec<DenseLayer>),
}

/// One of the three refinement architectures, with its parameters.
#[derive(Clone, Debug)]
pub struct RefinementNet<T: Real> {
    kind: NetKind,
    task: Task,
    mode: NormalizationMode,
    epsilon_denom: T,
    store: ParamStore<T>,
    guidance: Vec<DenseLayer>,
    probability: Vec<DenseLayer>,
    combination: Combination,
}

/// Intermediate state kept by [`RefinementNet::forward_train`].
#[derive(Clone, Debug)]
pub struct NetCache<T: Real> {
    guidance: Vec<ConvCache<T>>,
    probability: Vec<ConvCache<T>>,
    adaptive: Vec<ForwardCache<T>>,
    dense: Vec<ConvCache<T>>,
    feature_channels: usize,
    confidence_channels: usize,
    spatial: [usize; 3],
}

fn add_dense<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    group: ParamGroup,
    channels: &[usize],
    size: usize,
    last: Activation,
) -> Vec<DenseLayer> {
    let n = channels.len() - 1;
    (0..n)
        .map(|k| {
            let p = ConvParams::<T>::init_uniform(channels[k + 1], channels[k], size, rng);
            let d_out = p.bias.len();
            let weight = store.add(format!("{prefix}.{k}.weight"), group, p.weight);
            let bias = store.add(
                format!("{prefix}.{k}.bias"),
                group,
                Tensor::from_vec([1, 1, 1, d_out], p.bias).expect("finite init"),
            );
            let activation = if k + 1 == n { last } else { Activation::Relu };
            DenseLayer {
                weight,
                bias,
                activation,
            }
        })
        .collect()
}

impl<T: Real> RefinementNet<T> {
    /// Builds `kind` for `task` with Advanced normalization.
    pub fn build(kind: NetKind, task: Task, seed: u64) -> Result<Self> {
        Self::build_with_mode(kind, task, NormalizationMode::Advanced, seed)
    }

    /// Builds with an explicit normalization mode for the adaptive layers
    /// (ignored by [`NetKind::Simple`]).
    pub fn build_with_mode(kind: NetKind, task: Task, mode: NormalizationMode, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let est = task.estimate_channels();
        let prob = task.probability_channels();
        let branch = ParamGroup::Branch;
        let (guidance, probability, combination) = match kind {
            NetKind::Ppac => {
                let g = add_dense(&mut store, &mut rng, "guidance", branch, &[3, 15, 15, 10], BRANCH_KERNEL, Activation::None);
                let p = add_dense(&mut store, &mut rng, "probability", branch, &[prob, 5, 5, 2], BRANCH_KERNEL, Activation::Sigmoid);
                let c = add_adaptive(&mut store, &mut rng, est, true)?;
                (g, p, c)
            }
            NetKind::Pac => {
                let hidden = match task {
                    Task::Flow => 15,
                    Task::Segmentation => 13,
                };
                let g = add_dense(
                    &mut store,
                    &mut rng,
                    "guidance",
                    branch,
                    &[3 + prob, hidden, hidden, GUIDANCE_FEATURES],
                    BRANCH_KERNEL,
                    Activation::None,
                );
                let c = add_adaptive(&mut store, &mut rng, est, false)?;
                (g, Vec::new(), c)
            }
            NetKind::Simple => {
                let c = add_dense(
                    &mut store,
                    &mut rng,
                    "combination",
                    branch,
                    &[est + prob + 3, 11, 11, est],
                    COMBINATION_KERNEL,
                    Activation::None,
                );
                (Vec::new(), Vec::new(), Combination::Dense(c))
            }
        };
        Ok(Self {
            kind,
            task,
            mode,
            epsilon_denom: T::DEFAULT_EPS,
            store,
            guidance,
            probability,
            combination,
        })
    }

    pub fn kind(&self) -> NetKind {
        self.kind
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn normalization_mode(&self) -> NormalizationMode {
        self.mode
    }

    pub fn set_normalization_mode(&mut self, mode: NormalizationMode) {
        self.mode = mode;
    }

    pub fn epsilon_denom(&self) -> T {
        self.epsilon_denom
    }

    pub fn set_epsilon_denom(&mut self, eps: T) -> Result<()> {
        if !(eps > T::zero()) {
            return Err(Error::InvalidArgument(format!("epsilon_denom must be positive, got {eps}")));
        }
        self.epsilon_denom = eps;
        Ok(())
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn parameter_count(&self) -> usize {
        self.store.parameter_count()
    }

    /// Parameter counts of the guidance, probability and combination branches.
    pub fn parameter_breakdown(&self) -> Vec<(&'static str, usize)> {
        let count = |prefix: &str| {
            self.store
                .iter()
                .filter(|p| p.name.split('.').next() == Some(prefix))
                .map(|p| p.value.len())
                .sum()
        };
        ["guidance", "probability", "combination"]
            .into_iter()
            .map(|b| (b, count(b)))
            .collect()
    }

    pub fn adaptive_layer_count(&self) -> usize {
        match &self.combination {
            Combination::Adaptive(l) => l.len(),
            Combination::Dense(_) => 0,
        }
    }

    /// Guidance channels used as pixel features by adaptive layer `layer`.
    pub fn feature_channels(&self, layer: usize) -> Option<Range<usize>> {
        match &self.combination {
            Combination::Adaptive(l) => l.get(layer).map(|a| a.features.clone()),
            Combination::Dense(_) => None,
        }
    }

    /// Probability-branch channel used as confidence by adaptive layer `layer`.
    pub fn confidence_channel(&self, layer: usize) -> Option<usize> {
        match &self.combination {
            Combination::Adaptive(l) => l.get(layer).and_then(|a| a.confidence),
            Combination::Dense(_) => None,
        }
    }

    fn adaptive_layers(&self) -> Result<&[AdaptiveLayer]> {
        match &self.combination {
            Combination::Adaptive(l) => Ok(l),
            Combination::Dense(_) => Err(Error::InvalidArgument(format!(
                "{} network has no adaptive layers",
                self.kind.tag()
            ))),
        }
    }

    pub fn adaptive_params(&self, layer: usize) -> Result<AdaptiveKernelParams<T>> {
        let l = self
            .adaptive_layers()?
            .get(layer)
            .ok_or_else(|| Error::InvalidArgument(format!("no adaptive layer {layer}")))?;
        self.layer_params(l)
    }

    pub fn set_adaptive_params(&mut self, layer: usize, params: &AdaptiveKernelParams<T>) -> Result<()> {
        let l = self
            .adaptive_layers()?
            .get(layer)
            .cloned()
            .ok_or_else(|| Error::InvalidArgument(format!("no adaptive layer {layer}")))?;
        let bias = Tensor::from_vec([1, 1, 1, params.bias.len()], params.bias.clone())?;
        for (id, value) in [
            (l.weight, &params.weight),
            (l.log_norm_weight, &params.log_norm_weight),
            (l.bias, &bias),
        ] {
            let slot = self.store.value_mut(id);
            if slot.shape() != value.shape() {
                return Err(Error::shape("RefinementNet::set_adaptive_params", slot.shape(), value.shape()));
            }
            *slot = value.clone();
        }
        Ok(())
    }

    fn layer_params(&self, l: &AdaptiveLayer) -> Result<AdaptiveKernelParams<T>> {
        AdaptiveKernelParams::new(
            self.store.value(l.weight).clone(),
            self.store.value(l.log_norm_weight).clone(),
            self.store.value(l.bias).data().to_vec(),
            true,
        )
    }

    fn dense_params(&self, l: &DenseLayer) -> ConvParams<T> {
        ConvParams {
            weight: self.store.value(l.weight).clone(),
            bias: self.store.value(l.bias).data().to_vec(),
        }
    }

    fn run_dense(&self, layers: &[DenseLayer], x: &Tensor<T>, caches: Option<&mut Vec<ConvCache<T>>>) -> Result<Tensor<T>> {
        let mut x = x.clone();
        let mut caches = caches;
        for l in layers {
            let (y, cache) = conv2d_forward(&x, &self.dense_params(l), l.activation)?;
            if let Some(c) = caches.as_deref_mut() {
                c.push(cache);
            }
            x = y;
        }
        Ok(x)
    }

    fn guidance_input(&self, inputs: &NetInputs<T>) -> Result<Tensor<T>> {
        match self.kind {
            NetKind::Pac => Tensor::concat_channels(&[&inputs.guidance, &inputs.log_probability]),
            _ => Ok(inputs.guidance.clone()),
        }
    }

    /// Guidance-branch output, `(n, 10, h, w)`.
    pub fn guidance_features(&self, inputs: &NetInputs<T>) -> Result<Tensor<T>> {
        inputs.validate(self.task)?;
        self.run_dense(&self.guidance, &self.guidance_input(inputs)?, None)
    }

    /// Probability-branch output, `(n, 2, h, w)`; `None` without the branch.
    pub fn confidences(&self, inputs: &NetInputs<T>) -> Result<Option<Tensor<T>>> {
        inputs.validate(self.task)?;
        if self.probability.is_empty() {
            return Ok(None);
        }
        self.run_dense(&self.probability, &inputs.log_probability, None).map(Some)
    }

    /// Runs the adaptive combination branch on given features and confidences.
    pub fn combine(
        &self,
        estimate: &Tensor<T>,
        features: &Tensor<T>,
        confidences: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let mut x = estimate.clone();
        for l in self.adaptive_layers()? {
            let (y, _) = adaptive_conv_forward(&x, &self.layer_params(l)?, self.layer_config(l, features, confidences))?;
            x = y;
        }
        Ok(x)
    }

    fn layer_config(&self, l: &AdaptiveLayer, features: &Tensor<T>, confidences: Option<&Tensor<T>>) -> AdaptiveConvConfig<T> {
        let mut cfg = AdaptiveConvConfig::new(self.mode)
            .with_epsilon(self.epsilon_denom)
            .with_features(features.channel_range(l.features.clone()));
        if let (Some(c), Some(k)) = (confidences, l.confidence) {
            cfg = cfg.with_confidences(c.channel_range(k..k + 1));
        }
        cfg
    }

    /// Refined estimate, same shape as `inputs.estimate`.
    pub fn forward(&self, inputs: &NetInputs<T>) -> Result<Tensor<T>> {
        self.forward_impl(inputs, None)
    }

    /// Forward pass that also returns what [`RefinementNet::backward`] needs.
    pub fn forward_train(&self, inputs: &NetInputs<T>) -> Result<(Tensor<T>, NetCache<T>)> {
        let [n, _, h, w] = inputs.estimate.shape();
        let mut cache = NetCache {
            guidance: Vec::new(),
            probability: Vec::new(),
            adaptive: Vec::new(),
            dense: Vec::new(),
            feature_channels: 0,
            confidence_channels: 0,
            spatial: [n, h, w],
        };
        let out = self.forward_impl(inputs, Some(&mut cache))?;
        Ok((out, cache))
    }

    fn forward_impl(&self, inputs: &NetInputs<T>, mut cache: Option<&mut NetCache<T>>) -> Result<Tensor<T>> {
        inputs.validate(self.task)?;
        match &self.combination {
            Combination::Dense(layers) => {
                // predicts a correction added onto the estimate
                let x = Tensor::concat_channels(&[&inputs.estimate, &inputs.log_probability, &inputs.guidance])?;
                let mut out = self.run_dense(layers, &x, cache.as_deref_mut().map(|c| &mut c.dense))?;
                out.data_mut().iter_mut().zip(inputs.estimate.data()).for_each(|(o, e)| *o += *e);
                Ok(out)
            }
            Combination::Adaptive(layers) => {
                let features = self.run_dense(
                    &self.guidance,
                    &self.guidance_input(inputs)?,
                    cache.as_deref_mut().map(|c| &mut c.guidance),
                )?;
                let confidences = if self.probability.is_empty() {
                    None
                } else {
                    Some(self.run_dense(
                        &self.probability,
                        &inputs.log_probability,
                        cache.as_deref_mut().map(|c| &mut c.probability),
                    )?)
                };
                if let Some(c) = cache.as_deref_mut() {
                    c.feature_channels = features.channels();
                    c.confidence_channels = confidences.as_ref().map_or(0, |t| t.channels());
                }
                let mut x = inputs.estimate.clone();
                for l in layers {
                    let cfg = self.layer_config(l, &features, confidences.as_ref());
                    let (y, fc) = adaptive_conv_forward(&x, &self.layer_params(l)?, cfg)?;
                    if let Some(c) = cache.as_deref_mut() {
                        c.adaptive.push(fc);
                    }
                    x = y;
                }
                Ok(x)
            }
        }
    }

    /// Back-propagates `grad_output` and accumulates parameter gradients into
    /// the store. Inputs receive no gradient.
    pub fn backward(&mut self, cache: &NetCache<T>, grad_output: &Tensor<T>) -> Result<()> {
        let [n, h, w] = cache.spatial;
        match self.combination.clone() {
            Combination::Dense(layers) => {
                self.backward_dense(&layers, &cache.dense, grad_output.clone())?;
            }
            Combination::Adaptive(layers) => {
                let mut dfeat = Tensor::<T>::zeros([n, cache.feature_channels, h, w]);
                let mut dconf = Tensor::<T>::zeros([n, cache.confidence_channels, h, w]);
                let mut g = grad_output.clone();
                for (l, fc) in layers.iter().zip(&cache.adaptive).rev() {
                    let grads = adaptive_conv_backward(fc, &g)?;
                    self.store.accumulate_grad(l.weight, grads.weight.data())?;
                    self.store.accumulate_grad(l.log_norm_weight, grads.log_norm_weight.data())?;
                    self.store.accumulate_grad(l.bias, &grads.bias)?;
                    if let Some(df) = &grads.features {
                        add_channels(&mut dfeat, df, l.features.start);
                    }
                    if let (Some(dc), Some(k)) = (&grads.confidences, l.confidence) {
                        add_channels(&mut dconf, dc, k);
                    }
                    g = grads.input;
                }
                let guidance = self.guidance.clone();
                self.backward_dense(&guidance, &cache.guidance, dfeat)?;
                if !self.probability.is_empty() {
                    let probability = self.probability.clone();
                    self.backward_dense(&probability, &cache.probability, dconf)?;
                }
            }
        }
        Ok(())
    }

    fn backward_dense(&mut self, layers: &[DenseLayer], caches: &[ConvCache<T>], grad: Tensor<T>) -> Result<()> {
        if layers.len() != caches.len() {
            return Err(Error::shape("RefinementNet::backward cache", layers.len(), caches.len()));
        }
        let mut g = grad;
        for (k, (l, c)) in layers.iter().zip(caches).enumerate().rev() {
            let grads = conv2d_backward(c, &g, k > 0)?;
            self.store.accumulate_grad(l.weight, grads.weight.data())?;
            self.store.accumulate_grad(l.bias, &grads.bias)?;
            if let Some(gi) = grads.input {
                g = gi;
            }
        }
        Ok(())
    }

    /// Same architecture and parameter values at another precision. Adam
    /// state and gradients are not carried over.
    pub fn cast<U: Real>(&self) -> RefinementNet<U> {
        let mut store = ParamStore::new();
        for p in self.store.iter() {
            store.add(p.name.clone(), p.group, p.value.cast());
        }
        RefinementNet {
            kind: self.kind,
            task: self.task,
            mode: self.mode,
            epsilon_denom: U::DEFAULT_EPS,
            store,
            guidance: self.guidance.clone(),
            probability: self.probability.clone(),
            combination: self.combination.clone(),
        }
    }
}

fn add_adaptive<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    channels: usize,
    with_confidences: bool,
) -> Result<Combination> {
    let per_layer = GUIDANCE_FEATURES / ADAPTIVE_LAYERS;
    let layers = (0..ADAPTIVE_LAYERS)
        .map(|k| {
            let p = AdaptiveKernelParams::<T>::init_positive(channels, channels, COMBINATION_KERNEL, true, rng)?;
            let group = ParamGroup::Combination;
            let bias = Tensor::from_vec([1, 1, 1, channels], p.bias)?;
            Ok(AdaptiveLayer {
                weight: store.add(format!("combination.{k}.weight"), group, p.weight),
                log_norm_weight: store.add(format!("combination.{k}.log_norm_weight"), group, p.log_norm_weight),
                bias: store.add(format!("combination.{k}.bias"), group, bias),
                features: k * per_layer..(k + 1) * per_layer,
                confidence: with_confidences.then_some(k),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Combination::Adaptive(layers))
}

fn add_channels<T: Real>(dst: &mut Tensor<T>, src: &Tensor<T>, start: usize) {
    let [n, c, _, _] = src.shape();
    for b in 0..n {
        for k in 0..c {
            dst.plane_mut(b, start + k)
                .iter_mut()
                .zip(src.plane(b, k))
                .for_each(|(d, s)| *d += *s);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count(kind: NetKind, task: Task) -> usize {
        RefinementNet::<f32>::build(kind, task, 0).unwrap().parameter_count()
    }

    #[test]
    fn parameter_counts_match_layer_algebra() {
        assert_eq!(count(NetKind::Ppac, Task::Flow), 12_252);
        assert_eq!(count(NetKind::Ppac, Task::Segmentation), 14_290);
        assert_eq!(count(NetKind::Pac, Task::Flow), 12_615);
        assert_eq!(count(NetKind::Pac, Task::Segmentation), 15_549);
        assert_eq!(count(NetKind::Simple, Task::Flow), 12_421);
    }

    #[test]
    fn ppac_flow_breakdown() {
        let net = RefinementNet::<f64>::build(NetKind::Ppac, Task::Flow, 0).unwrap();
        assert_eq!(
            net.parameter_breakdown(),
            vec![("guidance", 10_540), ("probability", 1_512), ("combination", 200)]
        );
    }

    #[test]
    fn guidance_split_indices() {
        let net = RefinementNet::<f64>::build(NetKind::Ppac, Task::Flow, 0).unwrap();
        assert_eq!(net.feature_channels(0), Some(0..5));
        assert_eq!(net.feature_channels(1), Some(5..10));
        assert_eq!(net.confidence_channel(0), Some(0));
        assert_eq!(net.confidence_channel(1), Some(1));
        let pac = RefinementNet::<f64>::build(NetKind::Pac, Task::Flow, 0).unwrap();
        assert_eq!(pac.confidence_channel(0), None);
    }

    #[test]
    fn kind_and_task_tags_parse() {
        for k in [NetKind::Ppac, NetKind::Pac, NetKind::Simple] {
            assert_eq!(k.tag().parse::<NetKind>().unwrap(), k);
        }
        for t in [Task::Flow, Task::Segmentation] {
            assert_eq!(t.tag().parse::<Task>().unwrap(), t);
        }
        assert!("resnet".parse::<NetKind>().is_err());
    }
}
