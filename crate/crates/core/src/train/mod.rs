//! Parameters, optimization and gradient verification.

mod adam;
pub mod gradcheck;
mod loss;
mod params;
mod schedule;
mod trainer;

pub use adam::{adam_step, BETA1, BETA2, EPSILON};
pub use gradcheck::{grad_check, gradient_suite, Differentiable, GradCheckReport, SuiteEntry};
pub use loss::{aee_loss, cross_entropy_loss, LossKind, IGNORE_LABEL};
pub use params::{Param, ParamGroup, ParamId, ParamStore};
pub use schedule::LrSchedule;
pub use trainer::{evaluate, train_epochs, EpochLog, Sample, Target, TrainConfig, TrainOutcome};
