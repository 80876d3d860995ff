//! Pixel-adaptive convolutions.
//!
//! One operator covers three filters. Per output pixel `i` and channel `q`
//!
//! ```text
//! out[q, i] = sum_{j in N(i)} c_j * K(f_i, f_j) * W[q, :, i - j] . v[:, j]
//! ```
//!
//! followed by a normalization and a bias. `K` is the Gaussian RBF kernel on
//! pixel features `f` (identically one when no features are given) and `c` is
//! a per-pixel confidence (identically one when absent). Without features and
//! confidences the operator is an ordinary zero-padded convolution.
//!
//! [`NormalizationMode::Advanced`] divides by a second pass of the same sum
//! over an all-ones input, weighted by the strictly positive `exp(log_W')`.

mod dense;
mod kernel;
mod op;

pub use dense::{conv2d_backward, conv2d_forward, Activation, ConvCache, ConvGrads, ConvParams};
pub use kernel::{kernel_tensor, rbf_kernel};
pub use op::{adaptive_conv_backward, adaptive_conv_forward, AdaptiveGrads, ForwardCache};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NormalizationMode {
    /// Raw weighted sum.
    None,
    /// Feature kernel rescaled to sum to one over each neighborhood.
    Kernel,
    /// Division by the auxiliary all-ones pass weighted by `exp(log_W')`.
    Advanced,
}

impl NormalizationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            NormalizationMode::None => "none",
            NormalizationMode::Kernel => "kernel",
            NormalizationMode::Advanced => "advanced",
        }
    }
}

impl std::str::FromStr for NormalizationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(NormalizationMode::None),
            "kernel" => Ok(NormalizationMode::Kernel),
            "advanced" => Ok(NormalizationMode::Advanced),
            other => Err(Error::InvalidArgument(format!(
                "unknown normalization mode `{other}` (expected none|kernel|advanced)"
            ))),
        }
    }
}

/// Learnable state of one adaptive layer.
///
/// `weight` has shape `(d_out, d_in, s, s)`, or `(1, 1, s, s)` when
/// `shared_channels` is set, in which case the single slice filters every
/// channel independently and `d_out == d_in`. The normalization weight is
/// kept as its logarithm so that `exp(log_norm_weight)` is positive for any
/// finite value.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveKernelParams<T: Real> {
    pub weight: Tensor<T>,
    pub log_norm_weight: Tensor<T>,
    pub bias: Vec<T>,
    pub shared_channels: bool,
}

impl<T: Real> AdaptiveKernelParams<T> {
    pub fn new(
        weight: Tensor<T>,
        log_norm_weight: Tensor<T>,
        bias: Vec<T>,
        shared_channels: bool,
    ) -> Result<Self> {
        let [o, i, s, s2] = weight.shape();
        if s != s2 || s % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "kernel must be square with odd size, got {s}x{s2}"
            )));
        }
        if log_norm_weight.shape() != weight.shape() {
            return Err(Error::shape(
                "AdaptiveKernelParams::log_norm_weight",
                weight.shape(),
                log_norm_weight.shape(),
            ));
        }
        if shared_channels && (o, i) != (1, 1) {
            return Err(Error::shape("shared AdaptiveKernelParams::weight", [1, 1, s, s], weight.shape()));
        }
        if !shared_channels && bias.len() != o {
            return Err(Error::shape("AdaptiveKernelParams::bias", o, bias.len()));
        }
        Ok(Self {
            weight,
            log_norm_weight,
            bias,
            shared_channels,
        })
    }

    /// Params whose normalization weight equals `weight` exactly.
    /// Non-positive weights map to a normalization weight of zero.
    pub fn matched(weight: Tensor<T>, bias: Vec<T>, shared_channels: bool) -> Result<Self> {
        let log_norm = weight.map(log_or_floor);
        Self::new(weight, log_norm, bias, shared_channels)
    }

    /// Positive random `W` drawn from `U(0.05, 0.15)`, `W' = W`, zero bias.
    pub fn init_positive<R: Rng>(
        channels_out: usize,
        channels_in: usize,
        size: usize,
        shared_channels: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let (o, i) = if shared_channels { (1, 1) } else { (channels_out, channels_in) };
        let weight = Tensor::from_fn([o, i, size, size], |_, _, _, _| T::of(rng.gen_range(0.05..0.15)));
        Self::matched(weight, vec![T::zero(); channels_out], shared_channels)
    }

    pub fn size(&self) -> usize {
        self.weight.height()
    }

    pub fn out_channels(&self) -> usize {
        self.bias.len()
    }

    pub fn norm_weight(&self) -> Tensor<T> {
        self.log_norm_weight.map(|v| v.exp())
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.log_norm_weight.len() + self.bias.len()
    }
}

/// Log that sends zero (and below) to a large negative but finite value, so
/// `exp` of it underflows to exactly zero.
pub fn log_or_floor<T: Real>(v: T) -> T {
    if v > T::zero() {
        v.ln()
    } else {
        T::of(-1000.0)
    }
}

/// Per-call inputs of the adaptive operator besides the filtered signal.
#[derive(Clone, Debug)]
pub struct AdaptiveConvConfig<T: Real> {
    pub mode: NormalizationMode,
    /// Pixel features `(n, k, h, w)`; `None` means `K == 1`.
    pub features: Option<Tensor<T>>,
    /// One confidence per pixel `(n, 1, h, w)`; `None` means `c == 1`.
    pub confidences: Option<Tensor<T>>,
    pub epsilon_denom: T,
}

impl<T: Real> AdaptiveConvConfig<T> {
    pub fn new(mode: NormalizationMode) -> Self {
        Self {
            mode,
            features: None,
            confidences: None,
            epsilon_denom: T::DEFAULT_EPS,
        }
    }

    pub fn with_features(mut self, features: Tensor<T>) -> Self {
        self.features = Some(features);
        self
    }

    pub fn with_confidences(mut self, confidences: Tensor<T>) -> Self {
        self.confidences = Some(confidences);
        self
    }

    pub fn with_epsilon(mut self, eps: T) -> Self {
        self.epsilon_denom = eps;
        self
    }
}

/// Output index range `[lo, hi)` whose neighbor at offset `d` lies inside
/// `[0, len)`.
#[inline]
pub(crate) fn valid_range(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}
