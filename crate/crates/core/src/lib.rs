pub mod adaptive;
pub mod data;
pub mod error;
pub mod io;
pub mod net;
pub mod tensor;
pub mod train;

pub use adaptive::{
    adaptive_conv_backward, adaptive_conv_forward, kernel_tensor, rbf_kernel, AdaptiveConvConfig,
    AdaptiveGrads, AdaptiveKernelParams, ForwardCache, NormalizationMode,
};
pub use data::{generate_scene, SceneSpec, SyntheticScene};
pub use error::{Error, Result};
pub use net::{NetInputs, NetKind, RefinementNet, Task};
pub use tensor::{PixelCoord, Real, Tensor};
