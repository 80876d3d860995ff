//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adaptive::{
    adaptive_conv_backward, adaptive_conv_forward, conv2d_backward, conv2d_forward, Activation,
    AdaptiveConvConfig, AdaptiveKernelParams, ConvParams, NormalizationMode,
};
use crate::error::Result;
use crate::net::{NetInputs, NetKind, RefinementNet, Task};
use crate::tensor::Tensor;
use crate::train::loss::{aee_loss, cross_entropy_loss, IGNORE_LABEL};

/// Something with a scalar loss over a list of named, flat, `f64` tensors.
pub trait Differentiable {
    /// Name and length of every tensor taking part in the check.
    fn tensors(&self) -> Vec<(String, usize)>;
    fn get(&self, tensor: usize, index: usize) -> f64;
    fn set(&mut self, tensor: usize, index: usize, value: f64);
    fn loss(&self) -> Result<f64>;
    /// Analytic gradients, one vector per entry of [`Differentiable::tensors`].
    fn analytic(&self) -> Result<Vec<Vec<f64>>>;
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Coordinate {
    pub tensor: String,
    pub index: usize,
}

impl std::fmt::Display for Coordinate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}[{}]", self.tensor, self.index)
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<Coordinate>,
    /// First coordinate whose analytic or numeric gradient was not finite.
    pub non_finite: Option<Coordinate>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.non_finite.is_none() && self.max_rel_error < self.tolerance
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let status = if self.passed() { "ok" } else { "FAIL" };
        write!(f, "{status} max_rel_err={:.3e} over {} coords", self.max_rel_error, self.checked)?;
        if let Some(c) = &self.non_finite {
            write!(f, " non-finite at {c}")?;
        } else if let Some(c) = &self.worst {
            write!(f, " worst at {c}")?;
        }
        Ok(())
    }
}

/// Default coordinate budget; larger targets are checked on a seeded sample.
pub const MAX_COORDINATES: usize = 10_000;

/// Compares analytic gradients against central differences.
///
/// Step size is `max(1e-5 * |x|, 1e-6)`, retried at 1/16 and 1/256 of that
/// when the first estimate disagrees. The per-coordinate error is
/// `|a - n| / max(1, |a| + |n|)`, smallest over the tried steps.
pub fn grad_check<D: Differentiable>(
    target: &mut D,
    tolerance: f64,
    max_coordinates: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let specs = target.tensors();
    let analytic = target.analytic()?;
    let mut coords: Vec<(usize, usize)> = specs
        .iter()
        .enumerate()
        .flat_map(|(t, (_, len))| (0..*len).map(move |i| (t, i)))
        .collect();
    if coords.len() > max_coordinates {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked: Vec<usize> = sample(&mut rng, coords.len(), max_coordinates).into_vec();
        picked.sort_unstable();
        coords = picked.into_iter().map(|k| coords[k]).collect();
    }

    let mut report = GradCheckReport {
        tolerance,
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        non_finite: None,
    };
    for (t, i) in coords {
        let coord = || Coordinate {
            tensor: specs[t].0.clone(),
            index: i,
        };
        let a = analytic[t][i];
        let x = target.get(t, i);
        let base_h = (1e-5 * x.abs()).max(1e-6);
        let mut numeric = f64::NAN;
        let mut err = f64::INFINITY;
        // A step that straddles a ReLU kink gives a one-sided slope mix; a
        // wrong analytic gradient stays wrong at every step size.
        for shrink in [1.0, 16.0, 256.0] {
            let h = base_h / shrink;
            target.set(t, i, x + h);
            let up = target.loss();
            target.set(t, i, x - h);
            let down = target.loss();
            target.set(t, i, x);
            let n = match (up, down) {
                (Ok(u), Ok(d)) => (u - d) / (2.0 * h),
                _ => f64::NAN,
            };
            if !n.is_finite() {
                numeric = n;
                break;
            }
            let e = (a - n).abs() / (a.abs() + n.abs()).max(1.0);
            if e < err {
                (numeric, err) = (n, e);
            }
            if err <= tolerance {
                break;
            }
        }
        report.checked += 1;
        if !numeric.is_finite() || !a.is_finite() {
            report.non_finite = Some(coord());
            break;
        }
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some(coord());
        }
    }
    Ok(report)
}

fn uniform(rng: &mut ChaCha8Rng, shape: [usize; 4], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(lo..hi))
}

fn probe_loss(out: &Tensor<f64>, probe: &Tensor<f64>) -> f64 {
    out.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
}

/// A standard convolution layer under the linear loss `sum(out * probe)`.
#[derive(Clone, Debug)]
pub struct ConvProbe {
    pub input: Tensor<f64>,
    pub params: ConvParams<f64>,
    pub activation: Activation,
    pub probe: Tensor<f64>,
}

impl ConvProbe {
    pub fn random(shape: [usize; 4], d_out: usize, s: usize, activation: Activation, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = uniform(&mut rng, shape, -1.0, 1.0);
        let params = ConvParams::init_uniform(d_out, shape[1], s, &mut rng);
        let probe = uniform(&mut rng, [shape[0], d_out, shape[2], shape[3]], -1.0, 1.0);
        Self {
            input,
            params,
            activation,
            probe,
        }
    }
}

impl Differentiable for ConvProbe {
    fn tensors(&self) -> Vec<(String, usize)> {
        vec![
            ("input".into(), self.input.len()),
            ("weight".into(), self.params.weight.len()),
            ("bias".into(), self.params.bias.len()),
        ]
    }
    fn get(&self, t: usize, i: usize) -> f64 {
        match t {
            0 => self.input.data()[i],
            1 => self.params.weight.data()[i],
            _ => self.params.bias[i],
        }
    }
    fn set(&mut self, t: usize, i: usize, v: f64) {
        match t {
            0 => self.input.data_mut()[i] = v,
            1 => self.params.weight.data_mut()[i] = v,
            _ => self.params.bias[i] = v,
        }
    }
    fn loss(&self) -> Result<f64> {
        let (out, _) = conv2d_forward(&self.input, &self.params, self.activation)?;
        Ok(probe_loss(&out, &self.probe))
    }
    fn analytic(&self) -> Result<Vec<Vec<f64>>> {
        let (_, cache) = conv2d_forward(&self.input, &self.params, self.activation)?;
        let g = conv2d_backward(&cache, &self.probe, true)?;
        Ok(vec![
            g.input.expect("requested").into_data(),
            g.weight.into_data(),
            g.bias,
        ])
    }
}

/// One adaptive layer under the linear loss `sum(out * probe)`.
#[derive(Clone, Debug)]
pub struct AdaptiveProbe {
    pub input: Tensor<f64>,
    pub params: AdaptiveKernelParams<f64>,
    pub mode: NormalizationMode,
    pub features: Option<Tensor<f64>>,
    pub confidences: Option<Tensor<f64>>,
    pub probe: Tensor<f64>,
    pub epsilon_denom: f64,
}

impl AdaptiveProbe {
    /// Random instance. Weights are drawn from `[-0.5, 0.5]` except in
    /// `Advanced` mode where `log_W'` is independent of `W`.
    #[allow(clippy::too_many_arguments)]
    pub fn random(
        shape: [usize; 4],
        d_out: usize,
        s: usize,
        shared: bool,
        mode: NormalizationMode,
        feature_dims: Option<usize>,
        with_confidences: bool,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [n, d, h, w] = shape;
        let d_out = if shared { d } else { d_out };
        let input = uniform(&mut rng, shape, -1.0, 1.0);
        let wshape = if shared { [1, 1, s, s] } else { [d_out, d, s, s] };
        let weight = uniform(&mut rng, wshape, -0.5, 0.5);
        let log_norm = uniform(&mut rng, wshape, -2.5, -0.5);
        let bias = (0..d_out).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let params = AdaptiveKernelParams::new(weight, log_norm, bias, shared).expect("valid shapes");
        let features = feature_dims.map(|k| uniform(&mut rng, [n, k, h, w], -1.0, 1.0));
        let confidences = with_confidences.then(|| uniform(&mut rng, [n, 1, h, w], 0.1, 1.0));
        let probe = uniform(&mut rng, [n, d_out, h, w], -1.0, 1.0);
        Self {
            input,
            params,
            mode,
            features,
            confidences,
            probe,
            epsilon_denom: 1e-8,
        }
    }

    pub fn config(&self) -> AdaptiveConvConfig<f64> {
        AdaptiveConvConfig {
            mode: self.mode,
            features: self.features.clone(),
            confidences: self.confidences.clone(),
            epsilon_denom: self.epsilon_denom,
        }
    }

    fn slot(&self, t: usize) -> usize {
        // 0 input, 1 weight, 2 log_norm_weight, 3 bias, 4 features, 5 confidences
        let mut slots = vec![0, 1, 2, 3];
        if self.features.is_some() {
            slots.push(4);
        }
        if self.confidences.is_some() {
            slots.push(5);
        }
        slots[t]
    }
}

impl Differentiable for AdaptiveProbe {
    fn tensors(&self) -> Vec<(String, usize)> {
        let mut v = vec![
            ("input".to_string(), self.input.len()),
            ("weight".to_string(), self.params.weight.len()),
            ("log_norm_weight".to_string(), self.params.log_norm_weight.len()),
            ("bias".to_string(), self.params.bias.len()),
        ];
        if let Some(f) = &self.features {
            v.push(("features".into(), f.len()));
        }
        if let Some(c) = &self.confidences {
            v.push(("confidences".into(), c.len()));
        }
        v
    }
    fn get(&self, t: usize, i: usize) -> f64 {
        match self.slot(t) {
            0 => self.input.data()[i],
            1 => self.params.weight.data()[i],
            2 => self.params.log_norm_weight.data()[i],
            3 => self.params.bias[i],
            4 => self.features.as_ref().expect("slot").data()[i],
            _ => self.confidences.as_ref().expect("slot").data()[i],
        }
    }
    fn set(&mut self, t: usize, i: usize, v: f64) {
        match self.slot(t) {
            0 => self.input.data_mut()[i] = v,
            1 => self.params.weight.data_mut()[i] = v,
            2 => self.params.log_norm_weight.data_mut()[i] = v,
            3 => self.params.bias[i] = v,
            4 => self.features.as_mut().expect("slot").data_mut()[i] = v,
            _ => self.confidences.as_mut().expect("slot").data_mut()[i] = v,
        }
    }
    fn loss(&self) -> Result<f64> {
        let (out, _) = adaptive_conv_forward(&self.input, &self.params, self.config())?;
        Ok(probe_loss(&out, &self.probe))
    }
    fn analytic(&self) -> Result<Vec<Vec<f64>>> {
        let (_, cache) = adaptive_conv_forward(&self.input, &self.params, self.config())?;
        let g = adaptive_conv_backward(&cache, &self.probe)?;
        let mut v = vec![
            g.input.into_data(),
            g.weight.into_data(),
            g.log_norm_weight.into_data(),
            g.bias,
        ];
        if let Some(f) = g.features {
            v.push(f.into_data());
        }
        if let Some(c) = g.confidences {
            v.push(c.into_data());
        }
        Ok(v)
    }
}

/// A full refinement network on fixed random inputs, scored by its task loss.
#[derive(Clone, Debug)]
pub struct NetProbe {
    pub net: RefinementNet<f64>,
    pub inputs: NetInputs<f64>,
    pub target: Tensor<f64>,
}

impl NetProbe {
    pub fn random(kind: NetKind, task: Task, h: usize, w: usize, seed: u64) -> Result<Self> {
        let mut net = RefinementNet::<f64>::build(kind, task, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        // move the adaptive weights off their matched initialization so the
        // normalization-weight gradients are exercised independently
        for p in net.params_mut().iter_mut() {
            if p.name.ends_with("log_norm_weight") || p.name.starts_with("combination") && p.name.ends_with("bias") {
                p.value.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
            }
        }
        let inputs = NetInputs::random(task, 1, h, w, &mut rng);
        let target = match task {
            Task::Flow => uniform(&mut rng, [1, 2, h, w], -3.0, 3.0),
            Task::Segmentation => {
                Tensor::from_fn([1, 1, h, w], |_, _, _, _| rng.gen_range(0..task.estimate_channels()) as f64)
            }
        };
        Ok(Self { net, inputs, target })
    }
}

impl Differentiable for NetProbe {
    fn tensors(&self) -> Vec<(String, usize)> {
        self.net.params().iter().map(|p| (p.name.clone(), p.value.len())).collect()
    }
    fn get(&self, t: usize, i: usize) -> f64 {
        self.net.params().iter().nth(t).expect("tensor index").value.data()[i]
    }
    fn set(&mut self, t: usize, i: usize, v: f64) {
        self.net.params_mut().iter_mut().nth(t).expect("tensor index").value.data_mut()[i] = v;
    }
    fn loss(&self) -> Result<f64> {
        let out = self.net.forward(&self.inputs)?;
        Ok(match self.net.task() {
            Task::Flow => aee_loss(&out, &self.target, None)?.0,
            Task::Segmentation => cross_entropy_loss(&out, &self.target, IGNORE_LABEL)?.0,
        })
    }
    fn analytic(&self) -> Result<Vec<Vec<f64>>> {
        let mut net = self.net.clone();
        let (out, cache) = net.forward_train(&self.inputs)?;
        let grad = match net.task() {
            Task::Flow => aee_loss(&out, &self.target, None)?.1,
            Task::Segmentation => cross_entropy_loss(&out, &self.target, IGNORE_LABEL)?.1,
        };
        net.params_mut().zero_grads();
        net.backward(&cache, &grad)?;
        Ok(net
            .params()
            .iter()
            .map(|p| p.grad.clone().unwrap_or_else(|| vec![0.0; p.value.len()]))
            .collect())
    }
}

/// Result of one named entry of [`gradient_suite`].
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

/// The full 64-bit gradient suite: standard convolution, the adaptive layer
/// in every mode with and without features and confidences, and every
/// refinement network.
pub fn gradient_suite(seed: u64, tolerance: f64) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    let mut push = |name: String, report: GradCheckReport| out.push(SuiteEntry { name, report });

    for (k, act) in [Activation::None, Activation::Relu, Activation::Sigmoid].into_iter().enumerate() {
        let mut p = ConvProbe::random([1, 2, 4, 4], 3, 3, act, seed + k as u64);
        push(format!("conv {act:?}"), grad_check(&mut p, tolerance, MAX_COORDINATES, seed)?);
    }

    let mut case = 0u64;
    for mode in [NormalizationMode::None, NormalizationMode::Kernel, NormalizationMode::Advanced] {
        for features in [None, Some(3)] {
            for confidences in [false, true] {
                for shared in [false, true] {
                    case += 1;
                    let mut p = AdaptiveProbe::random(
                        [2, 2, 5, 6],
                        3,
                        3,
                        shared,
                        mode,
                        features,
                        confidences,
                        seed.wrapping_mul(31).wrapping_add(case),
                    );
                    let label = match (features.is_some(), confidences) {
                        (false, false) => "conv",
                        (true, false) => "pac",
                        (false, true) => "conf-only",
                        (true, true) => "ppac",
                    };
                    let name = format!(
                        "adaptive {label} mode={} {}",
                        mode.as_str(),
                        if shared { "shared" } else { "full" }
                    );
                    push(name, grad_check(&mut p, tolerance, MAX_COORDINATES, seed)?);
                }
            }
        }
    }

    for (kind, task) in [
        (NetKind::Ppac, Task::Flow),
        (NetKind::Pac, Task::Flow),
        (NetKind::Simple, Task::Flow),
        (NetKind::Ppac, Task::Segmentation),
    ] {
        let mut p = NetProbe::random(kind, task, 6, 7, seed)?;
        push(
            format!("net {}-{}", kind.tag(), task.tag()),
            grad_check(&mut p, tolerance, MAX_COORDINATES, seed)?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_layer_passes() {
        let mut p = ConvProbe::random([1, 2, 4, 4], 3, 3, Activation::None, 1);
        let r = grad_check(&mut p, 1e-4, MAX_COORDINATES, 0).unwrap();
        assert!(r.passed(), "{r}");
        assert_eq!(r.checked, 32 + 54 + 3);
    }

    #[test]
    fn ppac_layer_advanced_passes() {
        let mut p = AdaptiveProbe::random([1, 2, 5, 5], 2, 3, false, NormalizationMode::Advanced, Some(2), true, 3);
        let r = grad_check(&mut p, 1e-4, MAX_COORDINATES, 0).unwrap();
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn subsampling_respects_budget() {
        let mut p = ConvProbe::random([1, 2, 4, 4], 3, 3, Activation::Relu, 1);
        let r = grad_check(&mut p, 1e-4, 20, 9).unwrap();
        assert_eq!(r.checked, 20);
    }
}
