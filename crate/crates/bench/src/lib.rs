//! Fixtures shared by the benchmarks.

use ppac_core::adaptive::{AdaptiveConvConfig, AdaptiveKernelParams, NormalizationMode};
use ppac_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform(rng: &mut ChaCha8Rng, shape: [usize; 4], lo: f32, hi: f32) -> Tensor<f32> {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(lo..hi))
}

/// A flow-sized combination layer: 2 channels, 7x7 shared taps, 5-d
/// features and one confidence channel over `h x w`.
pub fn combination_layer(h: usize, w: usize, mode: NormalizationMode) -> (Tensor<f32>, AdaptiveKernelParams<f32>, AdaptiveConvConfig<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = AdaptiveKernelParams::init_positive(2, 2, 7, true, &mut rng).expect("params");
    let cfg = AdaptiveConvConfig::new(mode)
        .with_features(uniform(&mut rng, [1, 5, h, w], -1.0, 1.0))
        .with_confidences(uniform(&mut rng, [1, 1, h, w], 0.05, 1.0));
    (uniform(&mut rng, [1, 2, h, w], -8.0, 8.0), params, cfg)
}
