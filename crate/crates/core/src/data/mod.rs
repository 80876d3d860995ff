//! Synthetic scenes and evaluation metrics.

pub mod metrics;
mod scene;

pub use metrics::{eval_flow, eval_segmentation, MetricReport, BOUNDARY_RADIUS};
pub use scene::{generate_scene, guidance_from_rgb, log_softmax, SceneSpec, SyntheticScene, MAX_FLOW};
